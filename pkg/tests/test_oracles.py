import itertools
from collections import deque

import numpy as np
import pytest

from transnas.baselines import cell_genotypes, random_cells, random_search_batch
from transnas.oracles import (
    OracleError, Surrogate, SurrogateOracle, TabularError, XorOracle, cell_spaces, double_xor_reward,
    load_tabular, surrogate_optimum,
)
from transnas.space import Genotype, edge_list, validate


def _genotype(mask, ops, n=7):
    e = len(edge_list(n))
    return Genotype(tuple(int(mask) >> k & 1 for k in range(e)), tuple(int(o) for o in ops))


def _random_valid(cell, count, rng):
    out = []
    while len(out) < count:
        masks, ops = random_cells(cell, 4 * count, rng)
        for m, o in zip(masks, ops):
            g = _genotype(m, o, cell.num_vertices)
            if validate(g):
                out.append(g)
    return out[:count]


def _pruned(g):
    # independent BFS: on-path vertices (with ops) and on-path edges
    n = g.num_vertices
    E = edge_list(n)
    fwd = {i: [j for (a, j), b in zip(E, g.edges) if b and a == i] for i in range(1, n + 1)}
    rev = {j: [a for (a, jj), b in zip(E, g.edges) if b and jj == j] for j in range(1, n + 1)}

    def reach(s, adj):
        seen, q = {s}, deque([s])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        return seen

    f, b = reach(1, fwd), reach(n, rev)
    verts = f & b
    edges = frozenset((i, j) for (i, j), on in zip(E, g.edges) if on and i in f and j in b)
    return frozenset((v, g.ops[v - 2]) for v in verts if 1 < v < n), edges


# --- double XOR ----------------------------------------------------------------

def test_xor_examples():
    assert double_xor_reward((1, 0, 1, 0, 0, 0, 0)) == 1
    assert double_xor_reward((0,) * 7) == 0
    assert double_xor_reward((1,) * 7) == 0


def test_xor_truth_table():
    ones = 0
    for a in itertools.product((0, 1), repeat=7):
        expect = int((a[0] != a[4]) and (a[2] != a[6]))
        assert double_xor_reward(a) == expect
        assert XorOracle().evaluate([str(x) for x in a]) == expect
        ones += expect
    assert ones == 32


def test_xor_contract():
    with pytest.raises(ValueError):
        double_xor_reward((1, 0, 1))
    with pytest.raises(ValueError):
        double_xor_reward((2, 0, 0, 0, 0, 0, 0))


# --- surrogate -------------------------------------------------------------------

def test_direct_edge_has_no_op_terms():
    s = Surrogate(42)
    k = edge_list().index((1, 7))
    for ops in [(1, 2, 3, 1, 2), (3, 3, 3, 3, 3)]:
        g = Genotype(tuple(int(e == (1, 7)) for e in edge_list()), ops)
        assert s.reward(g) == float(s.squash(s.d[k]))


def test_invalid_genotype_is_contract_error():
    s = Surrogate(42)
    with pytest.raises(OracleError):
        s.reward(Genotype((0,) * 21, (1,) * 5))


def test_tables_reproducible():
    a, b = Surrogate(42), Surrogate(42)
    assert np.array_equal(a.c, b.c) and np.array_equal(a.d, b.d)
    assert not np.array_equal(a.c, Surrogate(43).c)


def test_pruning_invariance_thousand_pairs():
    s = Surrogate(42)
    cell = cell_spaces()["full"]
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 1000:
        g = _random_valid(cell, 1, rng)[0]
        e = list(g.edges)
        o = list(g.ops)
        if rng.random() < 0.5:
            e[int(rng.integers(21))] ^= 1
        else:
            o[int(rng.integers(5))] = int(rng.integers(1, 4))
        h = Genotype(tuple(e), tuple(o))
        if not validate(h) or _pruned(h) != _pruned(g):
            continue
        assert s.reward(h) == s.reward(g)
        assert s.test_accuracy(h) == s.test_accuracy(g)
        checked += 1


def test_batch_matches_scalar_path():
    s = Surrogate(42)
    rng = np.random.default_rng(1)
    masks, ops = random_cells(cell_spaces()["full"], 3000, rng)
    ok, val, test = s.batch(masks, ops)
    for m, o, k, v, t in zip(masks, ops, ok, val, test):
        g = _genotype(m, o)
        assert k == validate(g)
        if k:
            assert v == pytest.approx(s.reward(g), abs=1e-12)
            assert t == pytest.approx(s.test_accuracy(g), abs=1e-12)
    assert ok.sum() > 500


def test_test_noise_bounded():
    s = Surrogate(42)
    _, _, val, test = random_search_batch(s, cell_spaces()["full"], 20_000, np.random.default_rng(2))
    assert np.all(np.abs(test - val) <= 0.01 + 1e-15)
    assert np.std(test - val) > 0.004


def test_optimum_dominates_random_sampling():
    s = Surrogate(42)
    cell = cell_spaces()["full"]
    opt = surrogate_optimum(s, cell)
    _, _, val, test = random_search_batch(s, cell, 100_000, np.random.default_rng(3))
    assert opt.valid >= val.max()
    assert opt.best_test >= test.max()
    assert s.reward(opt.genotype) == pytest.approx(opt.valid, abs=1e-12)
    assert validate(opt.genotype)


def test_seed42_optimum_value():
    opt = surrogate_optimum(Surrogate(42), cell_spaces()["full"])
    assert opt.valid == pytest.approx(0.9434700750156672, abs=1e-12)
    assert opt.best_test == pytest.approx(0.9501589240318574, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 7, 42])
def test_optimum_matches_enumeration_on_small_cell(seed):
    s = Surrogate(seed, num_vertices=4)
    for name, cell in cell_spaces(4).items():
        gs = cell_genotypes(cell)
        opt = surrogate_optimum(s, cell)
        assert opt.valid == pytest.approx(max(s.reward(g) for g in gs), abs=1e-12)
        assert opt.best_test == pytest.approx(max(s.test_accuracy(g) for g in gs), abs=1e-12)


def test_optimum_with_negative_edges_still_connects():
    s = Surrogate(5, num_vertices=4)
    s.c = np.abs(s.c)
    s.d = -np.abs(s.d) - 0.01
    s.lo = float(s.d.sum())
    s.hi = float(s.c.max(axis=1).sum())
    cell = cell_spaces(4)["full"]
    opt = surrogate_optimum(s, cell)
    assert validate(opt.genotype) and sum(opt.genotype.edges) >= 1
    assert opt.valid == pytest.approx(max(s.reward(g) for g in cell_genotypes(cell)), abs=1e-12)


def test_subspace_optima_below_full():
    s = Surrogate(42)
    cells = cell_spaces()
    full = surrogate_optimum(s, cells["full"]).valid
    for name in ("sub1", "sub2"):
        assert surrogate_optimum(s, cells[name]).valid <= full


def test_subspace_rewards_equal_full_rewards():
    s = Surrogate(42)
    cells = cell_spaces()
    full = SurrogateOracle(s, cells["full"])
    rng = np.random.default_rng(4)
    for name in ("sub1", "sub2"):
        sub = SurrogateOracle(Surrogate(42), cells[name])
        for g in _random_valid(cells[name], 300, rng):
            assert cells[name].contains(g) and cells["full"].contains(g)
            assert sub.evaluate(g) == full.evaluate(g)


# --- tabular loader ----------------------------------------------------------------

def _key(bits, ops):
    return "".join(map(str, bits)) + ";" + "".join(map(str, ops))


def test_tabular_three_rows(tmp_path):
    rows = [(_key([0] * 20 + [1], [1] * 5), 0.5, 0.4),
            (_key([1] + [0] * 19 + [1], [2] * 5), 0.6, 0.61),
            (_key([1, 1] + [0] * 19, [3] * 5), 0.7, 0.69)]
    p = tmp_path / "t.csv"
    p.write_text("genotype,valid_acc,test_acc\n" + "".join(f"{k},{v},{t}\n" for k, v, t in rows))
    o = load_tabular(p)
    for k, v, t in rows:
        g = Genotype.from_key(k)
        assert o.evaluate(g) == v and o.test_accuracy(g) == t
    assert o.best_valid == 0.7 and o.best_test == 0.69
    with pytest.raises(TabularError):
        o.evaluate(Genotype.from_key(_key([1] * 3 + [0] * 18, [1] * 5)))


def test_tabular_duplicate(tmp_path):
    k = _key([0] * 20 + [1], [1] * 5)
    p = tmp_path / "t.csv"
    p.write_text(f"genotype,valid_acc,test_acc\n{k},0.1,0.1\n{k},0.2,0.2\n")
    with pytest.raises(TabularError, match="line 3.*duplicate"):
        load_tabular(p)


@pytest.mark.parametrize("row,msg", [
    ("0101;11111,0.1,0.1", "line 2: malformed"),
    (_key([1] * 21, [1] * 5) + ",abc,0.1", "line 2: malformed"),
    (_key([1] * 21, [1] * 5) + ",0.1", "line 2: malformed"),
    (_key([1] * 21, [1] * 5) + ",1.5,0.1", "line 2: accuracy"),
])
def test_tabular_malformed(tmp_path, row, msg):
    p = tmp_path / "t.csv"
    p.write_text(f"genotype,valid_acc,test_acc\n{row}\n")
    with pytest.raises(TabularError, match=msg):
        load_tabular(p)


def test_tabular_bad_header(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(TabularError, match="header"):
        load_tabular(p)


def test_export_reload_round_trip(tmp_path):
    s = Surrogate(42)
    gs = _random_valid(cell_spaces()["full"], 1000, np.random.default_rng(5))
    gs = list(dict.fromkeys(gs))
    p = tmp_path / "export.csv"
    s.export_csv(p, gs)
    o = load_tabular(p)
    for g in gs:
        assert o.evaluate(g) == s.reward(g)
        assert o.test_accuracy(g) == s.test_accuracy(g)
