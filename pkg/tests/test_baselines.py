import copy
from collections import Counter

import numpy as np
import pytest

from transnas.baselines import (
    Individual, Population, RegularizedEvolution, RejectionLimit, cell_genotypes, mutate, mutate_once,
    random_search, random_search_batch, random_search_step, re_step,
)
from transnas.oracles import Surrogate, SurrogateOracle, XorOracle, cell_spaces, nasbench_space, xor_space
from transnas.space import Genotype, edge_list, load_merged, validate

FULL = ("full", "nasbench")


def _oracle(n=7, seed=42, name="full"):
    return SurrogateOracle(Surrogate(seed, num_vertices=n), cell_spaces(n)[name])


def test_random_search_returns_valid():
    sp = nasbench_space(("full",))
    rng = np.random.default_rng(0)
    o = _oracle()
    for _ in range(200):
        g, r = random_search_step(sp, FULL, o, rng)
        assert validate(g) and r == o.evaluate(g)


def test_random_search_log_counts_one_trial_per_call():
    sp = nasbench_space(("full",))
    calls = []

    class Counting:
        kind = "genotype"

        def evaluate(self, g):
            calls.append(g)
            return 0.5

    log = random_search(sp, FULL, Counting(), 30, np.random.default_rng(0))
    assert len(log) == len(calls) == 30
    assert [r.trial for r in log] == list(range(30))


def test_random_search_rejection_limit():
    sp = load_merged("state Edge[1,2] {0}\nstate Edge[1,3] {0}\nstate Edge[2,3] {0, 1}\n"
                     "space c = [Edge[1,2], Edge[1,3], Edge[2,3]]\npair c t\n")

    class Never:
        kind = "genotype"

        def evaluate(self, g):
            raise AssertionError("must not be called")

    with pytest.raises(RejectionLimit):
        random_search_step(sp, ("c", "t"), Never(), np.random.default_rng(0), max_rejects=50, num_vertices=3)


def test_xor_random_search_uniform():
    sp = xor_space()
    rng = np.random.default_rng(1)
    o = XorOracle()
    counts = Counter("".join(random_search_step(sp, ("xor", "xor"), o, rng)[0]) for _ in range(100_000))
    assert len(counts) == 128
    freq = np.array(list(counts.values())) / 100_000
    assert np.all(np.abs(freq - 1 / 128) <= 0.01)


def test_expected_max_matches_order_statistics():
    n_vert, draws, reps = 4, 10, 3000
    cell = cell_spaces(n_vert)["full"]
    sur = Surrogate(0, num_vertices=n_vert)
    vals = np.sort([sur.reward(g) for g in cell_genotypes(cell)])
    N = len(vals)
    k = np.arange(1, N + 1)
    exact = float((vals * ((k / N) ** draws - ((k - 1) / N) ** draws)).sum())

    sp = nasbench_space(("full",), n_vert)
    o = SurrogateOracle(sur, cell)
    rng = np.random.default_rng(2)
    best = [max(random_search_step(sp, FULL, o, rng, num_vertices=n_vert)[1] for _ in range(draws))
            for _ in range(reps)]
    assert abs(np.mean(best) - exact) <= 0.02 * exact


def test_batch_random_search_uniform_over_valid():
    cell = cell_spaces(4)["full"]
    sur = Surrogate(0, num_vertices=4)
    masks, ops, _, _ = random_search_batch(sur, cell, 42_300, np.random.default_rng(3), chunk=10_000)
    keys = Counter(zip(masks.tolist(), map(tuple, ops.tolist())))
    assert len(keys) == len(cell_genotypes(cell)) == 423
    c = np.array(list(keys.values()))
    chi2 = ((c - 100) ** 2 / 100).sum()
    df = 422
    assert chi2 < df + 5 * np.sqrt(2 * df)   # 5 sigma above the chi-square mean


# --- mutation ------------------------------------------------------------------------

def _random_valid(cell, rng):
    while True:
        g = Genotype(tuple(int(b) for b in rng.integers(0, 2, 21)), tuple(int(o) for o in rng.integers(1, 4, 5)))
        if validate(g) and cell.contains(g):
            return g


def test_mutation_hamming_distance_one():
    cell = cell_spaces()["full"]
    rng = np.random.default_rng(4)
    for _ in range(500):
        g = _random_valid(cell, rng)
        child, kind = mutate(g, cell, rng, with_kind=True)
        assert validate(child)
        de = sum(a != b for a, b in zip(g.edges, child.edges))
        do = sum(a != b for a, b in zip(g.ops, child.ops))
        assert (de, do) == ((1, 0) if kind == "edge" else (0, 1))


def test_mutation_kind_ratio():
    cell = cell_spaces()["full"]
    rng = np.random.default_rng(5)
    g = _random_valid(cell, rng)
    kinds = Counter(mutate_once(g, cell, rng)[1] for _ in range(10_000))
    assert abs(kinds["edge"] / 10_000 - 0.5) <= 0.03


def test_subspace_mutation_stays_inside():
    rng = np.random.default_rng(6)
    for name in ("sub1", "sub2"):
        cell = cell_spaces()[name]
        g = _random_valid(cell, rng)
        for _ in range(300):
            g = mutate(g, cell, rng)
            assert cell.contains(g)


def test_mutation_retry_limit():
    cell = cell_spaces(3)["full"]
    g = Genotype(tuple(int(e == (1, 3)) for e in edge_list(3)), (1,))
    with pytest.raises(RejectionLimit):
        mutate(g, cell, np.random.default_rng(0), max_tries=0)


# --- regularized evolution ------------------------------------------------------------

def test_identical_population_selects_that_genotype():
    g = Genotype(tuple(int(e == (1, 7)) for e in edge_list()), (1,) * 5)
    pop = Population()
    for b in range(100):
        pop.add(Individual(g, 0.3, b))
    assert pop.tournament(np.random.default_rng(0)).genotype == g


def test_tournament_ties_go_to_older():
    pop = Population(10, 10)
    g = Genotype(tuple(int(e == (1, 7)) for e in edge_list()), (1,) * 5)
    for b in range(10):
        pop.add(Individual(g, 0.5, b))
    assert pop.tournament(np.random.default_rng(0)).birth == 0


def test_tournament_monotonicity():
    rng = np.random.default_rng(7)
    pop = Population()
    cell = cell_spaces()["full"]
    o = _oracle()
    for b in range(100):
        g = _random_valid(cell, rng)
        pop.add(Individual(g, o.evaluate(g), b))
    for _ in range(200):
        twin = copy.deepcopy(rng)
        winner = pop.tournament(rng)
        idx = twin.choice(len(pop), size=8, replace=False)
        assert len(set(idx.tolist())) == 8
        assert all(winner.reward >= pop.members[i].reward for i in idx)


def test_population_size_and_aging():
    cell = cell_spaces()["full"]
    re = RegularizedEvolution(cell, _oracle(), np.random.default_rng(8))
    for t in range(400):
        re.step()
        assert len(re.pop) == min(t + 1, 100)
        if t >= 100:
            assert min(m.birth for m in re.pop.members) > t - 100
    assert re.trials == 400


def test_re_step_functional_form():
    cell = cell_spaces()["full"]
    rng = np.random.default_rng(9)
    o = _oracle()
    pop = Population()
    with pytest.raises(ValueError):
        re_step(pop, cell, o, rng, 0)
    for b in range(100):
        g = _random_valid(cell, rng)
        pop.add(Individual(g, o.evaluate(g), b))
    child, evicted = re_step(pop, cell, o, rng, 100)
    assert len(pop) == 100 and evicted.birth == 0 and pop.members[-1] is child


def test_re_beats_random_on_small_space():
    n = 4
    cell = cell_spaces(n)["full"]
    best_re, best_rs = [], []
    for rep in range(50):
        sur = Surrogate(42, num_vertices=n)
        re = RegularizedEvolution(cell, SurrogateOracle(sur, cell), np.random.default_rng([rep, 0]))
        best_re.append(max(r.reward for r in re.run(200)))
        _, _, val, _ = random_search_batch(sur, cell, 200, np.random.default_rng([rep, 1]), chunk=1000)
        best_rs.append(val.max())
    assert np.median(best_re) >= np.median(best_rs)


def test_re_log_schema():
    cell = cell_spaces()["full"]
    log = RegularizedEvolution(cell, _oracle(), np.random.default_rng(10)).run(120)
    assert [r.trial for r in log] == list(range(120))
    assert all(r.baseline is None and r.entropy is None and r.gamma is None for r in log)
    assert log[0].row()[4:] == ["", "", ""]
