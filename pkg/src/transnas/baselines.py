"""Random search and regularized (aging) evolution over cell genotypes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .oracles import CellSpace, Surrogate
from .space import Genotype, MergedSpace, Pair, decode, edge_list, validate
from .trainer import TrialRecord

POPULATION = 100
TOURNAMENT = 8


class RejectionLimit(RuntimeError):
    pass


# --- random search ----------------------------------------------------------

def random_actions(space: MergedSpace, pair: Pair, rng: np.random.Generator) -> list[str]:
    """Uniform draw over the pair's action chain (one choice per state)."""
    return [acts[int(rng.integers(len(acts)))] for _, acts in space.chain(pair)]


def random_search_step(space: MergedSpace, pair: Pair, oracle, rng: np.random.Generator,
                       max_rejects: int = 10_000, num_vertices: int = 7):
    """Sample uniformly until valid, then spend one oracle call.

    Returns ``(x, reward)`` where ``x`` is a genotype for genotype oracles and
    the action list otherwise.
    """
    if oracle.kind != "genotype":
        a = random_actions(space, pair, rng)
        return a, float(oracle.evaluate(a))
    for _ in range(max_rejects + 1):
        g = decode(space, pair, random_actions(space, pair, rng), num_vertices)
        if validate(g):
            return g, float(oracle.evaluate(g))
    raise RejectionLimit(f"no valid genotype after {max_rejects} rejections")


def random_search(space: MergedSpace, pair: Pair, oracle, budget: int, rng: np.random.Generator,
                  num_vertices: int = 7) -> list[TrialRecord]:
    log = []
    for t in range(budget):
        x, r = random_search_step(space, pair, oracle, rng, num_vertices=num_vertices)
        key = x.key() if isinstance(x, Genotype) else "".join(x)
        log.append(TrialRecord(t, pair, key, r))
    return log


def random_cells(cell: CellSpace, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform (edge mask, ops) draws from ``cell``, validity not checked."""
    allowed = np.array(cell.edge_allowed, dtype=np.int64)
    bits = rng.integers(0, 2, size=(n, len(allowed))) * allowed
    masks = bits @ (1 << np.arange(len(allowed), dtype=np.int64))
    ops = np.ones((n, cell.num_vertices - 2), dtype=np.int64)
    for k, choices in enumerate(cell.ops_allowed):
        if choices:
            ops[:, k] = np.asarray(choices)[rng.integers(len(choices), size=n)]
    return masks, ops


def random_search_batch(surrogate: Surrogate, cell: CellSpace, trials: int, rng: np.random.Generator,
                        chunk: int = 200_000):
    """Vectorised random search: the first ``trials`` valid draws.

    Returns ``(masks, ops, valid_acc, test_acc)`` in trial order.
    """
    out = [], [], [], []
    got = 0
    while got < trials:
        masks, ops = random_cells(cell, chunk, rng)
        ok, val, test = surrogate.batch(masks, ops)
        take = np.flatnonzero(ok)[: trials - got]
        for lst, arr in zip(out, (masks, ops, val, test)):
            lst.append(arr[take])
        got += len(take)
    return tuple(np.concatenate(x) for x in out)


# --- mutation ---------------------------------------------------------------

def _mutable_ops(cell: CellSpace) -> list[int]:
    return [k for k, ch in enumerate(cell.ops_allowed) if len(ch) > 1]


def mutate_once(g: Genotype, cell: CellSpace, rng: np.random.Generator) -> tuple[Genotype, str]:
    """One edge flip or one op change, chosen by a fair coin; may be invalid."""
    if rng.random() < 0.5:
        edges = [k for k, ok in enumerate(cell.edge_allowed) if ok]
        k = edges[int(rng.integers(len(edges)))]
        e = list(g.edges)
        e[k] ^= 1
        return Genotype(tuple(e), g.ops), "edge"
    positions = _mutable_ops(cell)
    k = positions[int(rng.integers(len(positions)))]
    others = [o for o in cell.ops_allowed[k] if o != g.ops[k]]
    ops = list(g.ops)
    ops[k] = others[int(rng.integers(len(others)))]
    return Genotype(g.edges, tuple(ops)), "op"


def mutate(g: Genotype, cell: CellSpace, rng: np.random.Generator, max_tries: int = 10_000,
           with_kind: bool = False):
    """Mutate the parent repeatedly until the child is valid."""
    for _ in range(max_tries):
        child, kind = mutate_once(g, cell, rng)
        if validate(child):
            return (child, kind) if with_kind else child
    raise RejectionLimit(f"no valid mutation of {g.key()} after {max_tries} tries")


# --- regularized evolution --------------------------------------------------

@dataclass(frozen=True)
class Individual:
    genotype: Genotype
    reward: float
    birth: int


class Population:
    """Aging population: insert at the young end, evict from the old end."""

    def __init__(self, capacity: int = POPULATION, sample_size: int = TOURNAMENT):
        if not 1 <= sample_size <= capacity:
            raise ValueError("need 1 <= sample_size <= capacity")
        self.capacity = capacity
        self.sample_size = sample_size
        self.members: deque[Individual] = deque()

    def __len__(self) -> int:
        return len(self.members)

    def add(self, ind: Individual) -> Individual | None:
        self.members.append(ind)
        if len(self.members) > self.capacity:
            return self.members.popleft()
        return None

    def tournament(self, rng: np.random.Generator) -> Individual:
        idx = rng.choice(len(self.members), size=self.sample_size, replace=False)
        return min((self.members[i] for i in idx), key=lambda m: (-m.reward, m.birth))


class RegularizedEvolution:
    """RE over ``cell`` with ``oracle``; warm-up draws count as trials."""

    def __init__(self, cell: CellSpace, oracle, rng: np.random.Generator,
                 capacity: int = POPULATION, sample_size: int = TOURNAMENT, task: str = "nasbench"):
        self.cell = cell
        self.oracle = oracle
        self.rng = rng
        self.pop = Population(capacity, sample_size)
        self.pair = (cell.name, task)
        self.trials = 0

    def _random_valid(self, max_rejects: int = 10_000) -> Genotype:
        for _ in range(max_rejects + 1):
            masks, ops = random_cells(self.cell, 1, self.rng)
            bits = [(int(masks[0]) >> k) & 1 for k in range(len(self.cell.edge_allowed))]
            g = Genotype(tuple(bits), tuple(int(o) for o in ops[0]))
            if validate(g):
                return g
        raise RejectionLimit(f"no valid genotype after {max_rejects} rejections")

    def _evaluate(self, g: Genotype) -> TrialRecord:
        ind = Individual(g, float(self.oracle.evaluate(g)), self.trials)
        self.pop.add(ind)
        rec = TrialRecord(self.trials, self.pair, g.key(), ind.reward)
        self.trials += 1
        return rec

    def step(self) -> TrialRecord:
        """One trial: a random individual during warm-up, else a tournament child."""
        if len(self.pop) < self.pop.capacity:
            return self._evaluate(self._random_valid())
        parent = self.pop.tournament(self.rng)
        return self._evaluate(mutate(parent.genotype, self.cell, self.rng))

    def run(self, budget: int, on_trial: Callable[[TrialRecord], None] | None = None) -> list[TrialRecord]:
        log = []
        for _ in range(budget):
            rec = self.step()
            log.append(rec)
            if on_trial is not None:
                on_trial(rec)
        return log


def re_step(pop: Population, cell: CellSpace, oracle, rng: np.random.Generator, birth: int):
    """Functional form of one post-warm-up step: ``(child, evicted)``."""
    if len(pop) < pop.capacity:
        raise ValueError("population is not at capacity; run warm-up first")
    parent = pop.tournament(rng)
    g = mutate(parent.genotype, cell, rng)
    child = Individual(g, float(oracle.evaluate(g)), birth)
    return child, pop.add(child)


def cell_genotypes(cell: CellSpace) -> list[Genotype]:
    """Every valid genotype of a (small) cell space, for exhaustive checks."""
    n = cell.num_vertices
    E = len(edge_list(n))
    allowed = [k for k, ok in enumerate(cell.edge_allowed) if ok]
    op_choices = [ch if ch else (1,) for ch in cell.ops_allowed]
    out = []
    for m in range(1 << len(allowed)):
        bits = [0] * E
        for j, k in enumerate(allowed):
            bits[k] = (m >> j) & 1
        for ops in np.array(np.meshgrid(*op_choices, indexing="ij")).reshape(len(op_choices), -1).T:
            g = Genotype(tuple(bits), tuple(int(o) for o in ops))
            if validate(g):
                out.append(g)
    return out
