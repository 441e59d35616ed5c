"""Experiment driver: replicas, per-trial logs, aggregate curves and summaries."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Policy
from .baselines import RegularizedEvolution, random_search_step
from .oracles import (
    XorOracle, Surrogate, SurrogateOracle, cell_spaces, load_tabular, nasbench_space, xor_space,
)
from .optim import AdamState
from .space import Genotype
from .trainer import TrainConfig, TrainState, TrialRecord, pair_label, train_joint, write_log
from .transfer import load_checkpoint, load_with_remap, restore, save_checkpoint, snapshot

KINDS = ("xor", "nasbench-scratch", "nasbench-transfer", "random", "re")
DEFAULT_BUDGET = {"xor": 3000}


class ConfigError(ValueError):
    pass


class AttentionError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed_base: int = 0
    replicas: int = 5
    budget: int | None = None         # trials; for transfer, the full-space phase
    joint_budget: int = 2000          # transfer only: trials on the two subspaces
    out: str = "runs"
    window: int = 100
    threshold: float = 0.99           # fraction of the best validation value
    surrogate_seed: int = 42
    tabular: str | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    num_vertices: int = 7
    stop_at_threshold: bool = False   # end a replica once the threshold is reached

    def __post_init__(self):
        if self.budget is None:
            self.budget = DEFAULT_BUDGET.get(self.experiment, 2000)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in KINDS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {', '.join(KINDS)}")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        min_budget = 0 if self.experiment == "nasbench-transfer" else 1
        if self.budget < min_budget:
            raise ConfigError(f"budget must be >= {min_budget}")
        if self.experiment == "nasbench-transfer" and self.checkpoint_in is None and self.joint_budget < 1:
            raise ConfigError("joint_budget must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must lie in (0, 1]")
        if self.tabular is not None and not Path(self.tabular).is_file():
            raise ConfigError(f"tabular file not found: {self.tabular}")
        for name in ("checkpoint_in", "checkpoint_out"):
            path = getattr(self, name)
            if path is not None and self.replicas > 1 and "{replica}" not in path:
                raise ConfigError(f"{name} needs a {{replica}} placeholder when replicas > 1")
        if self.checkpoint_in is not None:
            for r in range(self.replicas):
                p = self.checkpoint_path(self.checkpoint_in, r)
                if not Path(p).is_file():
                    raise ConfigError(f"checkpoint not found: {p}")

    def checkpoint_path(self, template: str, replica: int) -> str:
        return template.format(replica=replica)

    @property
    def seeds(self) -> list[int]:
        return [self.seed_base + r for r in range(self.replicas)]


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = str(types[name])
    if raw.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def read_config_file(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys act as underscores."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        key = key.strip().replace("-", "_")
        if not key or not value.strip():
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        out[key] = _coerce(key, value.strip())
    return out


def make_config(values: dict) -> ExperimentConfig:
    if "experiment" not in values:
        raise ConfigError("missing experiment kind")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- metrics -----------------------------------------------------------------

def moving_average(x: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over ``window`` values; shorter prefixes use what exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if not len(x):
        return x.copy()
    # direct window sums (no prefix-sum cancellation, so W = 1 is exactly the identity)
    sums = np.convolve(x, np.ones(window))[: len(x)]
    return sums / np.minimum(np.arange(1, len(x) + 1), window)


def best_so_far(x: Sequence[float]) -> np.ndarray:
    return np.maximum.accumulate(np.asarray(x, dtype=np.float64))


def compute_regret(valid: Sequence[float], test: Sequence[float], best_test: float | None) -> np.ndarray:
    """Best attainable test accuracy minus the test accuracy of the model with
    the best validation accuracy so far (earliest wins ties)."""
    if best_test is None:
        raise ValueError("optimum unknown: compute it with surrogate_optimum first")
    valid = np.asarray(valid, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    out = np.empty(len(valid))
    arg = 0
    for t in range(len(valid)):
        if valid[t] > valid[arg]:
            arg = t
        out[t] = best_test - test[arg]
    return out


@dataclass
class ThresholdResult:
    counts: list[int]
    censored: list[bool]
    budget: int

    @property
    def median(self) -> float:
        return float(np.median(self.counts))


def trials_to_threshold(curves: Sequence[Sequence[float]], threshold: float, budget: int | None = None) -> ThresholdResult:
    """Trials needed (1-based) until best-so-far reaches ``threshold``.

    Replicas that never get there are censored at the budget.
    """
    counts, cens = [], []
    for c in curves:
        b = len(c) if budget is None else budget
        hit = np.flatnonzero(best_so_far(c) >= threshold) if len(c) else np.array([], dtype=int)
        if hit.size:
            counts.append(int(hit[0]) + 1)
            cens.append(False)
        else:
            counts.append(b)
            cens.append(True)
    return ThresholdResult(counts, cens, budget if budget is not None else max((len(c) for c in curves), default=0))


def speedup(slow: ThresholdResult, fast: ThresholdResult) -> float:
    return slow.median / fast.median


def mean_band(rows: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and one standard error across replicas (the 68% band)."""
    a = np.vstack(rows)
    m = a.mean(axis=0)
    if a.shape[0] < 2:
        return m, np.zeros_like(m)
    return m, a.std(axis=0, ddof=1) / np.sqrt(a.shape[0])


def dump_attention(maps: Sequence[Sequence[np.ndarray]], last: int = 100):
    """Mean attention of the decision steps over the last ``last`` trajectories.

    ``maps[i][m-1]`` is the attention row of trajectory ``i`` at decision step
    ``m`` (keys 0..m, key 0 being the start token). Returns the mean matrix
    (rows are decision steps, padded with zeros) and the argmax key per row.
    """
    if not maps:
        raise AttentionError("no attention records")
    sel = maps[-last:]
    steps = len(sel[0])
    M = np.zeros((steps, steps + 1))
    for rows in sel:
        if len(rows) != steps or any(r is None for r in rows):
            raise AttentionError("attention records are missing or ragged")
        for m, row in enumerate(rows, start=1):
            M[m - 1, : m + 1] += row
    M /= len(sel)
    argmax = [int(M[m - 1, : m + 1].argmax()) for m in range(1, steps + 1)]
    return M, argmax


# --- running -----------------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _fresh_state(seed: int, stream: int) -> TrainState:
    return TrainState(AdamState(lr=TrainConfig.lr), _rng(seed, stream))


@dataclass
class ReplicaResult:
    seed: int
    log: list[TrialRecord]
    valid: np.ndarray
    test: np.ndarray
    joint_log: list[TrialRecord] = field(default_factory=list)
    attention: dict[int, list[list[np.ndarray]]] = field(default_factory=dict)


class Experiment:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        n = cfg.num_vertices
        self.cells = cell_spaces(n)
        if cfg.experiment == "xor":
            self.oracles = {"xor": XorOracle()}
        elif cfg.tabular is not None:
            table = load_tabular(cfg.tabular)
            self.oracles = {k: table for k in self.cells}
        else:
            sur = Surrogate(cfg.surrogate_seed, n)
            self.oracles = {k: SurrogateOracle(sur, c) for k, c in self.cells.items()}

    @property
    def target(self):
        return self.oracles["xor" if self.cfg.experiment == "xor" else "full"]

    def threshold_value(self) -> float:
        return self.cfg.threshold * self.target.best_valid

    def _agent_run(self, policy, space, state, budget, attention=False, stop=None):
        tcfg = TrainConfig(num_vertices=self.cfg.num_vertices)
        oracles = {p: self.oracles[p[0]] for p in space.pairs}
        valid, test, maps = [], [], []

        class _Stop(Exception):
            pass

        def on_trial(rec, traj):
            x = traj.genotype if traj.genotype is not None else traj.actions
            valid.append(rec.reward)
            test.append(float(oracles[rec.pair].test_accuracy(x)))
            if attention:
                maps.append([[s.attention[l][-1] for s in traj.steps] for l in range(len(traj.steps[0].attention))])
            if stop is not None and rec.reward >= stop:
                raise _Stop

        log: list[TrialRecord] = []
        try:
            train_joint(policy, space, oracles, tcfg, state, trials=budget,
                        on_trial=lambda r, t: (log.append(r), on_trial(r, t)), record_attention=attention)
        except _Stop:
            pass
        return log, np.array(valid), np.array(test), maps

    def run_replica(self, r: int) -> ReplicaResult:
        cfg = self.cfg
        seed = cfg.seed_base + r
        kind = cfg.experiment
        ck_in = cfg.checkpoint_path(cfg.checkpoint_in, r) if cfg.checkpoint_in else None
        ck_out = cfg.checkpoint_path(cfg.checkpoint_out, r) if cfg.checkpoint_out else None
        stop = self.threshold_value() if cfg.stop_at_threshold else None
        if kind in ("random", "re"):
            return self._baseline_replica(seed, stop)
        if kind == "nasbench-transfer":
            joint = nasbench_space(("sub1", "sub2"), cfg.num_vertices)
            joint_log = []
            if ck_in is not None:
                ckpt = load_checkpoint(ck_in)
            else:
                policy = Policy.init(joint, _rng(seed, 0))
                state = _fresh_state(seed, 1)
                joint_log, *_ = self._agent_run(policy, joint, state, cfg.joint_budget)
                if ck_out is not None:
                    save_checkpoint(policy, ck_out, state=state)
                ckpt = snapshot(policy)
            full = nasbench_space(("full",), cfg.num_vertices)
            policy, _ = load_with_remap(ckpt, full, _rng(seed, 2))
            state = _fresh_state(seed, 3)
            log, valid, test, _ = self._agent_run(policy, full, state, cfg.budget, stop=stop)
            return ReplicaResult(seed, log, valid, test, joint_log)
        space = xor_space() if kind == "xor" else nasbench_space(("full",), cfg.num_vertices)
        if ck_in is not None:
            policy, _, state = restore(load_checkpoint(ck_in))
            if state is None:
                state = _fresh_state(seed, 1)
        else:
            policy = Policy.init(space, _rng(seed, 0))
            state = _fresh_state(seed, 1)
        log, valid, test, maps = self._agent_run(policy, space, state, cfg.budget,
                                                 attention=(kind == "xor"), stop=stop)
        if ck_out is not None:
            save_checkpoint(policy, ck_out, state=state)
        res = ReplicaResult(seed, log, valid, test)
        if maps:
            res.attention = {l: [m[l] for m in maps] for l in range(len(maps[0]))}
        return res

    def _baseline_replica(self, seed: int, stop: float | None) -> ReplicaResult:
        cfg = self.cfg
        rng = _rng(seed, 4)
        oracle = self.oracles["full"]
        log, valid, test = [], [], []
        if cfg.experiment == "re":
            re = RegularizedEvolution(self.cells["full"], oracle, rng)
            step = lambda: re.step()  # noqa: E731
            geno = lambda rec: Genotype.from_key(rec.genotype)  # noqa: E731
        else:
            space = nasbench_space(("full",), cfg.num_vertices)
            pair = space.pairs[0]

            def step():
                g, rwd = random_search_step(space, pair, oracle, rng, num_vertices=cfg.num_vertices)
                return TrialRecord(len(log), pair, g.key(), rwd)
            geno = lambda rec: Genotype.from_key(rec.genotype)  # noqa: E731
        for _ in range(cfg.budget):
            rec = step()
            log.append(rec)
            valid.append(rec.reward)
            test.append(float(oracle.test_accuracy(geno(rec))))
            if stop is not None and rec.reward >= stop:
                break
        return ReplicaResult(seed, log, np.array(valid), np.array(test))


# --- output ------------------------------------------------------------------

def _f(x: float) -> str:
    return repr(float(x))


def _pad(a: np.ndarray, n: int) -> np.ndarray:
    """Extend a best-so-far style series to ``n`` points by holding its last value."""
    if len(a) >= n or len(a) == 0:
        return a[:n]
    return np.concatenate([a, np.full(n - len(a), a[-1])])


@dataclass
class ExperimentResult:
    cfg: ExperimentConfig
    replicas: list[ReplicaResult]
    threshold: ThresholdResult | None
    summary: dict


def replica_curves(res: ReplicaResult, window: int, best_test: float | None):
    best = best_so_far(res.valid)
    ma = moving_average(res.valid, window)
    regret = compute_regret(res.valid, res.test, best_test) if best_test is not None and len(res.valid) else None
    return best, ma, regret


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.validate()
    exp = Experiment(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    best_test = getattr(exp.target, "best_test", None)
    results = [exp.run_replica(r) for r in range(cfg.replicas)]
    thr_value = exp.threshold_value()

    bests, mas, regrets = [], [], []
    for r, res in enumerate(results):
        name = f"replica-{r:03d}.csv"
        if res.joint_log:
            (out / "joint").mkdir(exist_ok=True)
            with open(out / "joint" / name, "w", newline="") as fh:
                write_log(res.joint_log, fh)
        if not res.log:
            continue
        (out / "trials").mkdir(exist_ok=True)
        with open(out / "trials" / name, "w", newline="") as fh:
            write_log(res.log, fh)
        best, ma, regret = replica_curves(res, cfg.window, best_test)
        bests.append(best)
        mas.append(ma)
        if regret is not None:
            regrets.append(regret)
        (out / "curves").mkdir(exist_ok=True)
        with open(out / "curves" / name, "w") as fh:
            cols = ["trial", "reward", "test", "best", "moving_avg"] + (["regret"] if regret is not None else [])
            fh.write(",".join(cols) + "\n")
            for t in range(len(best)):
                row = [str(t + 1), _f(res.valid[t]), _f(res.test[t]), _f(best[t]), _f(ma[t])]
                if regret is not None:
                    row.append(_f(regret[t]))
                fh.write(",".join(row) + "\n")
        for layer, maps in sorted(res.attention.items()):
            (out / "attention").mkdir(exist_ok=True)
            M, arg = dump_attention(maps)
            with open(out / "attention" / f"replica-{r:03d}-layer{layer}.txt", "w") as fh:
                fh.write(f"# mean attention over the last {min(100, len(maps))} trajectories; "
                         "row = decision step, column = key position (0 = start)\n")
                for row in M:
                    fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
                fh.write("# argmax " + " ".join(str(a) for a in arg) + "\n")

    summary: dict = {
        "experiment": cfg.experiment,
        "seeds": cfg.seeds,
        "budget": cfg.budget,
        "target_best_valid": exp.target.best_valid,
        "target_best_test": best_test,
        "threshold_value": thr_value,
    }
    thr = None
    if bests:
        n = max(len(b) for b in bests)
        # stopped replicas hold their final best value; the moving average is only
        # aggregated when every replica ran the full budget
        mb, hb = mean_band([_pad(b, n) for b in bests])
        full = all(len(b) == n for b in bests)
        cols = {"best_mean": mb, "best_half": hb}
        if full:
            cols["ma_mean"], cols["ma_half"] = mean_band(mas)
            if regrets:
                cols["regret_mean"], cols["regret_half"] = mean_band(regrets)
        with open(out / "curve.csv", "w") as fh:
            fh.write("trial," + ",".join(cols) + "\n")
            for t in range(n):
                fh.write(str(t + 1) + "," + ",".join(_f(v[t]) for v in cols.values()) + "\n")
        thr = trials_to_threshold([r.valid for r in results], thr_value, cfg.budget)
        finals = [float(b[-1]) for b in bests]
        summary.update({
            "best_per_replica": finals,
            "median_best": float(np.median(finals)),
            "trials_to_threshold": thr.counts,
            "censored": thr.censored,
            "median_trials_to_threshold": thr.median,
        })
        if regrets and full:
            summary["final_regret_per_replica"] = [float(x[-1]) for x in regrets]
        if any(res.attention for res in results):
            summary["attention_argmax"] = {
                str(layer): [dump_attention(res.attention[layer])[1] for res in results]
                for layer in sorted(results[0].attention)
            }
    if any(res.joint_log for res in results):
        summary["joint_trials"] = [len(res.joint_log) for res in results]
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "config.txt", "w") as fh:
        for k, v in asdict(cfg).items():
            fh.write(f"{k} = {v}\n")
    return ExperimentResult(cfg, results, thr, summary)


def output_files(out: str | os.PathLike) -> list[Path]:
    root = Path(out)
    return sorted(p for p in root.rglob("*") if p.is_file())


__all__ = [
    "ConfigError", "Experiment", "ExperimentConfig", "ExperimentResult", "KINDS", "compute_regret",
    "dump_attention", "make_config", "mean_band", "moving_average", "pair_label", "read_config_file",
    "run_experiment", "speedup", "trials_to_threshold",
]
