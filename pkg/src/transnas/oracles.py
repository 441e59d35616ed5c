"""Reward oracles and the concrete spaces they score.

* double XOR over a 7-state binary chain;
* a seeded, separable stand-in for NAS-Bench-101 whose optimum can be found
  by exhaustive enumeration;
* a CSV-backed tabular oracle for user-supplied benchmark data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .space import (
    MAX_EDGES, OP_NAMES, Genotype, MergedSpace, SpaceError, edge_list, edge_state,
    load_merged, op_state, validate,
)

XOR_TASK = "xor"
NASBENCH_TASK = "nasbench"


class OracleError(RuntimeError):
    pass


# --- double XOR --------------------------------------------------------------

def xor_space_text(length: int = 7) -> str:
    lines = [f"state S{i} {{0, 1}}" for i in range(1, length + 1)]
    lines.append("space xor = [" + ", ".join(f"S{i}" for i in range(1, length + 1)) + "]")
    lines.append(f"pair xor {XOR_TASK}")
    return "\n".join(lines) + "\n"


def xor_space() -> MergedSpace:
    return load_merged(xor_space_text())


def double_xor_reward(a: Sequence[int]) -> int:
    """(a1 xor a5) and (a3 xor a7) on a 7-vector of bits."""
    if len(a) != 7:
        raise ValueError(f"double XOR needs 7 actions, got {len(a)}")
    if any(x not in (0, 1) for x in a):
        raise ValueError(f"actions must be binary, got {list(a)}")
    return int((a[0] ^ a[4]) and (a[2] ^ a[6]))


class XorOracle:
    kind = "actions"
    name = "double_xor"
    best_valid = 1.0
    best_test = 1.0

    def evaluate(self, actions: Sequence[str]) -> float:
        return float(double_xor_reward([int(x) for x in actions]))

    def test_accuracy(self, actions: Sequence[str]) -> float:
        return self.evaluate(actions)


# --- NAS-Bench-shaped spaces -------------------------------------------------

@dataclass(frozen=True)
class CellSpace:
    """Which edges and which ops per intermediate vertex a (sub)space allows."""
    name: str
    num_vertices: int
    edge_allowed: tuple[bool, ...]
    ops_allowed: tuple[tuple[int, ...], ...]  # per vertex 2..n-1; () = vertex removed

    @property
    def edge_mask(self) -> int:
        return sum(1 << k for k, ok in enumerate(self.edge_allowed) if ok)

    def contains(self, g: Genotype) -> bool:
        if g.num_vertices != self.num_vertices:
            return False
        if any(b and not ok for b, ok in zip(g.edges, self.edge_allowed)):
            return False
        return all(not allowed or op in allowed for op, allowed in zip(g.ops, self.ops_allowed))


def cell_spaces(num_vertices: int = 7) -> dict[str, CellSpace]:
    """The full space plus two subspaces without vertex n-1, ops {1,2} and {1,3}."""
    n = num_vertices
    edges = edge_list(n)
    gone = n - 1
    full = CellSpace("full", n, tuple(True for _ in edges), tuple((1, 2, 3) for _ in range(n - 2)))
    sub_edges = tuple(gone not in e for e in edges)

    def sub(name, ops):
        return CellSpace(name, n, sub_edges,
                         tuple(() if v == gone else ops for v in range(2, n)))

    return {"full": full, "sub1": sub("sub1", (1, 2)), "sub2": sub("sub2", (1, 3))}


def cell_space_text(space: CellSpace) -> str:
    """DSL lines declaring ``space``; states use the shared Edge/Op names."""
    n = space.num_vertices
    names = [edge_state(i, j) for (i, j), ok in zip(edge_list(n), space.edge_allowed) if ok]
    names += [op_state(v) for v, ops in zip(range(2, n), space.ops_allowed) if ops]
    lines = [f"space {space.name} = [" + ", ".join(names) + "]"]
    for v, ops in zip(range(2, n), space.ops_allowed):
        if ops and len(ops) < 3:
            lines.append(f"restrict {space.name}.{op_state(v)} to {{"
                         + ", ".join(OP_NAMES[o - 1] for o in ops) + "}")
    lines.append(f"pair {space.name} {NASBENCH_TASK}")
    return "\n".join(lines)


def nasbench_space_text(names: Iterable[str], num_vertices: int = 7) -> str:
    spaces = cell_spaces(num_vertices)
    n = num_vertices
    lines = [f"state {edge_state(i, j)} {{0, 1}}" for i, j in edge_list(n)]
    lines += [f"state {op_state(v)} {{" + ", ".join(OP_NAMES) + "}" for v in range(2, n)]
    for nm in names:
        lines.append(cell_space_text(spaces[nm]))
    return "\n".join(lines) + "\n"


def nasbench_space(names: Iterable[str] = ("full",), num_vertices: int = 7) -> MergedSpace:
    return load_merged(nasbench_space_text(names, num_vertices))


# --- vectorised cell analysis -------------------------------------------------

def mask_bits(masks: np.ndarray, num_edges: int) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(num_edges)) & 1).astype(bool)


def path_structure(bits: np.ndarray, num_vertices: int):
    """Forward/backward reachability per vertex (index 1..n) for a batch of edge sets."""
    n = num_vertices
    index = {e: k for k, e in enumerate(edge_list(n))}
    N = bits.shape[0]
    fwd = np.zeros((N, n + 1), dtype=bool)
    bwd = np.zeros((N, n + 1), dtype=bool)
    fwd[:, 1] = True
    for j in range(2, n + 1):
        for i in range(1, j):
            fwd[:, j] |= fwd[:, i] & bits[:, index[(i, j)]]
    bwd[:, n] = True
    for i in range(n - 1, 0, -1):
        for j in range(i + 1, n + 1):
            bwd[:, i] |= bwd[:, j] & bits[:, index[(i, j)]]
    return fwd, bwd


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


# --- separable surrogate --------------------------------------------------------

@dataclass
class Surrogate:
    """Seeded additive score over on-path op vertices and on-path edges.

    ``c[v-2, op-1]`` scores operation ``op`` at vertex ``v``; ``d[k]`` scores
    edge ``k`` (lexicographic order). Vertices and edges off every
    input->output path contribute nothing. Raw scores are mapped into [0, 1]
    by a fixed affine map from the attainable bounds.
    """
    seed: int = 42
    num_vertices: int = 7
    noise: float = 0.01
    c: np.ndarray = field(init=False, repr=False)
    d: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        n = self.num_vertices
        self.c = rng.normal(0.5, 1.0, size=(n - 2, 3))
        self.d = rng.normal(-0.3, 0.5, size=len(edge_list(n)))
        self.lo = float(np.minimum(self.c.min(axis=1), 0).sum() + np.minimum(self.d, 0).sum())
        self.hi = float(np.maximum(self.c.max(axis=1), 0).sum() + np.maximum(self.d, 0).sum())
        self._edges = edge_list(n)

    @property
    def num_edges(self) -> int:
        return len(self._edges)

    def squash(self, raw):
        return np.clip((np.asarray(raw) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    # scalar path: plain graph search, independent of the batch code
    def on_path(self, g: Genotype) -> tuple[set[int], set[tuple[int, int]]]:
        n = g.num_vertices
        fwd_adj = g.adjacency()
        rev_adj = [[] for _ in range(n + 1)]
        for u in range(1, n + 1):
            for v in fwd_adj[u]:
                rev_adj[v].append(u)

        def reach(start, adj):
            seen, stack = {start}, [start]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            return seen

        fw, bw = reach(1, fwd_adj), reach(n, rev_adj)
        verts = fw & bw
        edges = {(i, j) for i in range(1, n + 1) for j in fwd_adj[i] if i in fw and j in bw}
        return verts, edges

    def raw(self, g: Genotype) -> float:
        verts, edges = self.on_path(g)
        total = 0.0
        for v in range(2, g.num_vertices):
            if v in verts:
                total += self.c[v - 2, g.ops[v - 2] - 1]
        for k, e in enumerate(self._edges):
            if e in edges:
                total += self.d[k]
        return total

    def reward(self, g: Genotype) -> float:
        if g.num_vertices != self.num_vertices:
            raise OracleError(f"genotype has {g.num_vertices} vertices, surrogate {self.num_vertices}")
        if not validate(g):
            raise OracleError(f"invalid genotype {g.key()}")
        return float(self.squash(self.raw(g)))

    def canonical_key(self, g: Genotype) -> int:
        verts, edges = self.on_path(g)
        mask = sum(1 << k for k, e in enumerate(self._edges) if e in edges)
        code = sum((g.ops[v - 2] if v in verts else 0) << (2 * (v - 2)) for v in range(2, g.num_vertices))
        return (mask << (2 * (self.num_vertices - 2))) | code

    def _noise_from_key(self, key: np.ndarray) -> np.ndarray:
        h = _splitmix64(np.asarray(key, dtype=np.uint64) ^ _splitmix64(np.asarray([self.seed], dtype=np.uint64)))
        u = (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        return self.noise * (2.0 * u - 1.0)

    def test_accuracy(self, g: Genotype) -> float:
        val = self.reward(g)
        eps = self._noise_from_key(np.array([self.canonical_key(g)]))[0]
        return float(np.clip(val + eps, 0.0, 1.0))

    # batch path
    def batch(self, masks: np.ndarray, ops: np.ndarray):
        """Vectorised (valid, validation, test) for edge bitmasks and op arrays."""
        n = self.num_vertices
        E = self.num_edges
        masks = np.asarray(masks, dtype=np.int64)
        ops = np.asarray(ops, dtype=np.int64).reshape(len(masks), n - 2)
        bits = mask_bits(masks, E)
        fwd, bwd = path_structure(bits, n)
        valid = fwd[:, n] & (bits.sum(axis=1) <= MAX_EDGES)
        onv = (fwd & bwd)[:, 2:n]
        src = np.array([i for i, _ in self._edges])
        dst = np.array([j for _, j in self._edges])
        one = bits & fwd[:, src] & bwd[:, dst]
        opscore = self.c[np.arange(n - 2)[None, :], ops - 1]
        raw = (onv * opscore).sum(axis=1) + (one * self.d).sum(axis=1)
        val = self.squash(raw)
        pruned_mask = (one * (1 << np.arange(E))).sum(axis=1)
        code = (np.where(onv, ops, 0) << (2 * np.arange(n - 2))).sum(axis=1)
        key = (pruned_mask << (2 * (n - 2))) | code
        test = np.clip(val + self._noise_from_key(key), 0.0, 1.0)
        return valid, val, test

    def export_csv(self, path: str | Path, genotypes: Iterable[Genotype]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["genotype", "valid_acc", "test_acc"])
            for g in genotypes:
                w.writerow([g.key(), repr(self.reward(g)), repr(self.test_accuracy(g))])


@dataclass(frozen=True)
class Optimum:
    genotype: Genotype
    valid: float
    best_test: float


def surrogate_optimum(p: Surrogate, space: CellSpace) -> Optimum:
    """Exact optimum over every valid genotype of ``space``.

    Scores are separable, so each on-path vertex takes its best allowed op and
    only the edge subsets are enumerated. ``best_test`` is the maximum test
    accuracy over the space (test noise can reorder near-optimal cells).
    """
    n, E = p.num_vertices, p.num_edges
    allowed = space.edge_mask
    all_masks = np.arange(1 << E, dtype=np.int64)
    masks = all_masks[(all_masks & ~allowed) == 0]
    bits = mask_bits(masks, E)
    masks = masks[bits.sum(axis=1) <= MAX_EDGES]
    bits = bits[bits.sum(axis=1) <= MAX_EDGES]
    fwd, bwd = path_structure(bits, n)
    ok = fwd[:, n]
    masks, bits, fwd, bwd = masks[ok], bits[ok], fwd[ok], bwd[ok]
    best_op = np.ones(n - 2, dtype=np.int64)
    best_c = np.zeros(n - 2)
    for k, ops in enumerate(space.ops_allowed):
        if ops:
            scores = [p.c[k, o - 1] for o in ops]
            best_op[k] = ops[int(np.argmax(scores))]
            best_c[k] = max(scores)
    onv = (fwd & bwd)[:, 2:n]
    src = np.array([i for i, _ in edge_list(n)])
    dst = np.array([j for _, j in edge_list(n)])
    one = bits & fwd[:, src] & bwd[:, dst]
    raw = (onv * best_c).sum(axis=1) + (one * p.d).sum(axis=1)
    i = int(np.argmax(raw))
    ops = tuple(int(o) if onv[i, k] else _lowest(space.ops_allowed[k]) for k, o in enumerate(best_op))
    g = Genotype(tuple(int(b) for b in bits[i]), ops)
    vstar = float(p.squash(raw[i]))
    # best test: only cells within 2*noise of the optimum can win
    val_best = p.squash(raw)
    cand = (val_best >= vstar - 2 * p.noise - 1e-12)
    # canonical cells only (every edge on a path); others duplicate one of them
    cand &= (one == bits).all(axis=1)
    best_test = _best_test(p, space, masks[cand], onv[cand], vstar)
    return Optimum(g, vstar, best_test)


def _lowest(ops: tuple[int, ...]) -> int:
    return min(ops) if ops else 1


def _best_test(p: Surrogate, space: CellSpace, masks: np.ndarray, onv: np.ndarray, vstar: float) -> float:
    n = p.num_vertices
    choices = [ops if ops else (1,) for ops in space.ops_allowed]
    grids = np.array(np.meshgrid(*choices, indexing="ij")).reshape(n - 2, -1).T
    best = vstar if p.noise == 0 else -np.inf
    for start in range(0, len(masks), 2048):
        m = masks[start:start + 2048]
        reps = np.repeat(m, len(grids))
        ops = np.tile(grids, (len(m), 1))
        valid, val, test = p.batch(reps, ops)
        if valid.any():
            best = max(best, float(test[valid].max()))
    return best


class SurrogateOracle:
    kind = "genotype"

    def __init__(self, surrogate: Surrogate, space: CellSpace):
        self.surrogate = surrogate
        self.space = space
        self.name = f"surrogate-{surrogate.seed}-{space.name}"

    def evaluate(self, g: Genotype) -> float:
        return self.surrogate.reward(g)

    def test_accuracy(self, g: Genotype) -> float:
        return self.surrogate.test_accuracy(g)

    @cached_property
    def optimum(self) -> Optimum:
        return surrogate_optimum(self.surrogate, self.space)

    @property
    def best_valid(self) -> float:
        return self.optimum.valid

    @property
    def best_test(self) -> float:
        return self.optimum.best_test


# --- tabular data ----------------------------------------------------------

class TabularError(OracleError):
    pass


class TabularOracle:
    kind = "genotype"

    def __init__(self, records: dict[str, tuple[float, float]], name: str = "tabular"):
        self.records = records
        self.name = name

    def _lookup(self, g: Genotype) -> tuple[float, float]:
        try:
            return self.records[g.key()]
        except KeyError:
            raise TabularError(f"genotype {g.key()} not in table") from None

    def evaluate(self, g: Genotype) -> float:
        return self._lookup(g)[0]

    def test_accuracy(self, g: Genotype) -> float:
        return self._lookup(g)[1]

    @property
    def best_valid(self) -> float:
        return max(v for v, _ in self.records.values())

    @property
    def best_test(self) -> float:
        return max(t for _, t in self.records.values())


def load_tabular(path: str | Path) -> TabularOracle:
    records: dict[str, tuple[float, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["genotype", "valid_acc", "test_acc"]:
            raise TabularError(f"{path}: line 1: expected header genotype,valid_acc,test_acc")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                key, va, te = row
                g = Genotype.from_key(key)
                va, te = float(va), float(te)
            except (ValueError, SpaceError) as exc:
                raise TabularError(f"{path}: line {lineno}: malformed row ({exc})") from None
            if not (0.0 <= va <= 1.0 and 0.0 <= te <= 1.0):
                raise TabularError(f"{path}: line {lineno}: accuracy outside [0, 1]")
            if g.key() in records:
                raise TabularError(f"{path}: line {lineno}: duplicate genotype {g.key()}")
            records[g.key()] = (va, te)
    if not records:
        raise TabularError(f"{path}: no records")
    return TabularOracle(records, name=Path(path).stem)
