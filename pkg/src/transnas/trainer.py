"""REINFORCE + priority-queue training + entropy bonus, jointly over (space, task) pairs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .agent import Policy, Trajectory
from .optim import AdamState, adam_step
from .space import MergedSpace, Pair

LOG_COLUMNS = ("trial", "pair", "genotype", "reward", "baseline", "entropy", "gamma")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_pqt: float = 5.0
    lambda_ent: float = 0.15
    top_k: int = 25
    ema: float = 0.9
    lr: float = 5e-4
    max_trials: int = 1000
    gamma0: float = 0.1
    gamma_horizon: int = 100
    max_rejects: int = 10_000
    num_vertices: int = 7

    def __post_init__(self):
        if self.lambda_pqt < 0 or self.lambda_ent < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.ema < 1.0:
            raise ValueError("ema decay must lie in (0, 1)")


def gamma(t: int, gamma0: float = 0.1, horizon: int = 100) -> float:
    """Uniform-mixing weight at sampling step ``t``: linear from gamma0 to 0."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return max(0.0, gamma0 * (1.0 - t / horizon))


def pair_label(pair: Pair) -> str:
    return f"{pair[0]}:{pair[1]}"


def parse_pair(label: str) -> Pair:
    sp, _, task = label.partition(":")
    return sp, task


class PriorityQueue:
    """Top-K distinct action sequences by reward.

    Ties at the boundary keep the earlier sequence: a newcomer must beat the
    current minimum strictly, and the evicted entry is the newest of the
    lowest-reward ones.
    """

    def __init__(self, k: int = 25):
        self.k = k
        self.entries: dict[tuple[str, ...], tuple[float, int]] = {}
        self._clock = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, seq: Sequence[str], reward: float) -> bool:
        seq = tuple(seq)
        self._clock += 1
        if seq in self.entries:
            return False
        if len(self.entries) < self.k:
            self.entries[seq] = (reward, self._clock)
            return True
        worst = min(self.entries, key=lambda s: (self.entries[s][0], -self.entries[s][1]))
        if reward <= self.entries[worst][0]:
            return False
        del self.entries[worst]
        self.entries[seq] = (reward, self._clock)
        return True

    def sample(self, rng: np.random.Generator) -> tuple[str, ...]:
        keys = list(self.entries)
        return keys[int(rng.integers(len(keys)))]

    def contents(self) -> set[tuple[str, ...]]:
        return set(self.entries)


def update_queue(queue: PriorityQueue, traj: Trajectory) -> PriorityQueue:
    if traj.reward is None:
        raise TrainingError("trajectory has no reward")
    queue.push(traj.actions, traj.reward)
    return queue


def update_baseline(b: float | None, reward: float, alpha: float = 0.9) -> float:
    """EMA of rewards; the first observation initialises it."""
    if b is None:
        return float(reward)
    return alpha * b + (1.0 - alpha) * reward


@dataclass
class TrainState:
    adam: AdamState
    rng: np.random.Generator
    baselines: dict[Pair, float] = field(default_factory=dict)
    queues: dict[Pair, PriorityQueue] = field(default_factory=dict)
    pair_trials: dict[Pair, int] = field(default_factory=dict)
    trials: int = 0
    # running mean of rejected draws per accepted sample; sizes the sampling batch
    reject_rate: dict[Pair, float] = field(default_factory=dict)

    def parallel(self, pair: Pair) -> int:
        r = self.reject_rate.get(pair, 4.0)
        return int(min(8, max(1, round(1.0 + r))))

    @classmethod
    def fresh(cls, cfg: TrainConfig, seed: int) -> "TrainState":
        return cls(AdamState(lr=cfg.lr), np.random.default_rng(seed))

    def queue(self, pair: Pair, k: int) -> PriorityQueue:
        q = self.queues.get(pair)
        if q is None:
            q = self.queues[pair] = PriorityQueue(k)
        return q


# --- gradient terms -------------------------------------------------------------

def _grads(policy: Policy, build: Callable[[], ad.Tensor]) -> dict[str, np.ndarray]:
    params = policy.theta.param_list()
    with ad.Graph() as g:
        out = build()
    if not out.requires_grad:
        return {p.name: np.zeros_like(p.data) for p in params}
    return {p.name: gp for p, gp in zip(params, g.backward(out, params))}


def reinforce_grad(policy: Policy, space: MergedSpace, traj: Trajectory, baseline: float):
    """(R - b) * grad of sum_m log pi(a_m | ...), with the unmixed policy."""
    if traj.reward is None:
        raise TrainingError("trajectory has no reward")
    adv = traj.reward - baseline

    def build():
        lp, _ = policy.score(space, [(traj.pair, traj.actions)])
        return ad.scale(lp[0], adv)

    return _grads(policy, build)


def pqt_grad(policy: Policy, space: MergedSpace, pair: Pair, queue: PriorityQueue | None,
             rng: np.random.Generator):
    """Log-likelihood gradient of one stored sequence drawn uniformly; zero if empty."""
    if queue is None or len(queue) == 0:
        return {p.name: np.zeros_like(p.data) for p in policy.theta.param_list()}
    seq = queue.sample(rng)

    def build():
        lp, _ = policy.score(space, [(pair, list(seq))])
        return lp[0]

    return _grads(policy, build)


def entropy_grad(policy: Policy, space: MergedSpace, traj: Trajectory):
    """Gradient of the mean per-step policy entropy along the visited states."""
    def build():
        _, en = policy.score(space, [(traj.pair, traj.actions)])
        return en[0]

    return _grads(policy, build)


def combined_objective(policy: Policy, space: MergedSpace, traj: Trajectory, baseline: float,
                       replay: Sequence[str] | None, cfg: TrainConfig) -> ad.Tensor:
    """(R-b) log pi(traj) + lambda_pqt log pi(replay) + lambda_ent H(traj), in one batch."""
    items = [(traj.pair, traj.actions)]
    if replay is not None:
        items.append((traj.pair, list(replay)))
    lp, en = policy.score(space, items)
    obj = ad.add(ad.scale(lp[0], traj.reward - baseline), ad.scale(en[0], cfg.lambda_ent))
    if replay is not None:
        obj = ad.add(obj, ad.scale(lp[1], cfg.lambda_pqt))
    return obj


def combined_step(policy: Policy, space: MergedSpace, traj: Trajectory, state: TrainState,
                  cfg: TrainConfig) -> float:
    """One ascent step on the combined objective, then baseline/queue updates.

    Returns the baseline value used for the REINFORCE term.
    """
    if traj.reward is None:
        raise TrainingError("trajectory has no reward")
    pair = traj.pair
    b = state.baselines.get(pair)
    b_used = traj.reward if b is None else b
    q = state.queues.get(pair)
    replay = q.sample(state.rng) if q is not None and len(q) else None
    grads = _grads(policy, lambda: combined_objective(policy, space, traj, b_used, replay, cfg))
    # ascent: descend on the negated objective
    adam_step(policy.theta.arrays(), {k: -g for k, g in grads.items()}, state.adam)
    state.baselines[pair] = update_baseline(b, traj.reward, cfg.ema)
    update_queue(state.queue(pair, cfg.top_k), traj)
    return b_used


# --- training loop ------------------------------------------------------------

@dataclass
class TrialRecord:
    trial: int
    pair: Pair
    genotype: str
    reward: float
    baseline: float | None = None  # agent-only columns; blank for the baselines
    entropy: float | None = None
    gamma: float | None = None

    def row(self) -> list[str]:
        def f(x):
            return "" if x is None else repr(x)
        return [str(self.trial), pair_label(self.pair), self.genotype, repr(self.reward),
                f(self.baseline), f(self.entropy), f(self.gamma)]


def train_joint(policy: Policy, space: MergedSpace, oracles: Mapping[Pair, object],
                cfg: TrainConfig, state: TrainState, trials: int | None = None,
                on_trial: Callable[[TrialRecord, Trajectory], None] | None = None,
                record_attention: bool = False) -> list[TrialRecord]:
    """Run ``trials`` (default ``cfg.max_trials``) oracle evaluations.

    Each trial draws a pair uniformly, samples until valid (for genotype
    oracles), scores it, and takes one combined gradient step.
    """
    pairs = list(space.pairs)
    missing = [p for p in pairs if p not in oracles]
    if missing:
        raise TrainingError(f"no oracle for pairs {missing}")
    n = cfg.max_trials if trials is None else trials
    log: list[TrialRecord] = []
    for _ in range(n):
        pair = pairs[int(state.rng.integers(len(pairs)))]
        oracle = oracles[pair]
        gm = gamma(state.trials, cfg.gamma0, cfg.gamma_horizon)
        if oracle.kind == "genotype":
            traj = policy.sample_valid_genotype(space, pair, gm, state.rng, cfg.max_rejects,
                                                cfg.num_vertices, state.parallel(pair))
            state.reject_rate[pair] = 0.9 * state.reject_rate.get(pair, 4.0) + 0.1 * traj.rejects
            x, key = traj.genotype, traj.genotype.key()
        else:
            traj = policy.sample_trajectory(space, pair, gm, state.rng, record_attention)
            x, key = traj.actions, "".join(traj.actions)
        try:
            traj.reward = float(oracle.evaluate(x))
        except Exception as exc:
            raise TrainingError(f"oracle failed at trial {state.trials}: {exc}") from exc
        b = combined_step(policy, space, traj, state, cfg)
        rec = TrialRecord(state.trials, pair, key, traj.reward, b, traj.entropy, gm)
        log.append(rec)
        if on_trial is not None:
            on_trial(rec, traj)
        state.trials += 1
        state.pair_trials[pair] = state.pair_trials.get(pair, 0) + 1
    return log


def write_log(records: Sequence[TrialRecord], fh: io.TextIOBase, header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow(r.row())


def read_log(fh) -> list[TrialRecord]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
        raise TrainingError(f"unexpected log columns {reader.fieldnames}")

    def opt(x):
        return None if x == "" else float(x)

    return [TrialRecord(int(r["trial"]), parse_pair(r["pair"]), r["genotype"], float(r["reward"]),
                        opt(r["baseline"]), opt(r["entropy"]), opt(r["gamma"]))
            for r in reader]
