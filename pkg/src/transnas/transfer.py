"""Checkpoints and name-based parameter reuse across search spaces.

File layout (format version 1)::

    8 bytes   magic b"TNASCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   manifest length N, uint64 little-endian
    N bytes   manifest, UTF-8 JSON
    ...       payload: float64 little-endian arrays back to back

The manifest lists every array as ``{"key", "shape", "offset"}`` with the
offset counted in float64 elements from the start of the payload. Embedding
tables are stored one row per name (``state/<name>``, ``action/<state>/<action>``,
``task/<name>``, ``head/<state>``) so that they can be matched by name when
loading into a different space.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import (
    D_MODEL, EMBED_DIM, FFN_DIM, MAX_LEN, NUM_LAYERS, Policy, PolicyParams,
    _embed_init, init_head_w,
)
from .optim import AdamState
from .space import MergedSpace
from .trainer import PriorityQueue, TrainState, gamma

__all__ = [
    "Checkpoint", "CheckpointError", "RemapReport", "gamma", "load_checkpoint",
    "load_with_remap", "restore", "save_checkpoint", "snapshot",
]

MAGIC = b"TNASCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_TABLES = ("state_emb", "action_emb", "task_emb", "head_w", "head_b")


class CheckpointError(ValueError):
    pass


def model_fingerprint() -> str:
    dims = f"embed={EMBED_DIM};d_model={D_MODEL};layers={NUM_LAYERS};ffn={FFN_DIM};max_len={MAX_LEN}"
    return hashlib.sha256(dims.encode()).hexdigest()[:16]


def _state_key(s): return f"state/{s}"
def _action_key(s, a): return f"action/{s}/{a}"
def _task_key(t): return f"task/{t}"
def _head_key(s): return f"head/{s}"


def named_arrays(theta: PolicyParams) -> dict[str, np.ndarray]:
    """Flatten parameters into stable per-name keys."""
    out: dict[str, np.ndarray] = {}
    for i, s in enumerate(theta.states):
        out[_state_key(s)] = theta["state_emb"].data[i]
    for i, (s, a) in enumerate(theta.actions):
        out[_action_key(s, a)] = theta["action_emb"].data[i]
    for i, t in enumerate(theta.tasks):
        out[_task_key(t)] = theta["task_emb"].data[i]
    for i, s in enumerate(theta.states):
        out[_head_key(s)] = np.concatenate([theta["head_w"].data[i], theta["head_b"].data[i:i + 1]])
    for k, t in theta.tensors.items():
        if k not in _TABLES:
            out[k] = t.data
    return out


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def vocab(self) -> tuple[list[str], list[tuple[str, str]], list[str]]:
        v = self.manifest["vocab"]
        return list(v["states"]), [tuple(a) for a in v["actions"]], list(v["tasks"])


def snapshot(policy: Policy) -> Checkpoint:
    """In-memory checkpoint of the parameters only (no file round-trip)."""
    theta = policy.theta
    arrays = {k: v.copy() for k, v in named_arrays(theta).items()}
    manifest = {"format_version": VERSION, "fingerprint": model_fingerprint(),
                "vocab": {"states": theta.states, "actions": [list(a) for a in theta.actions],
                          "tasks": theta.tasks},
                "adam": None, "train_state": None}
    return Checkpoint(manifest, arrays)


def _train_state_json(state: TrainState) -> dict:
    def pkey(p):
        return [p[0], p[1]]
    return {
        "rng": state.rng.bit_generator.state,
        "baselines": [[pkey(p), b] for p, b in state.baselines.items()],
        "queues": [[pkey(p), q.k, q._clock, [[list(s), r, c] for s, (r, c) in q.entries.items()]]
                   for p, q in state.queues.items()],
        "pair_trials": [[pkey(p), n] for p, n in state.pair_trials.items()],
        "reject_rate": [[pkey(p), x] for p, x in state.reject_rate.items()],
        "trials": state.trials,
    }


def _train_state_from_json(d: dict, adam: AdamState) -> TrainState:
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng"]
    st = TrainState(adam, rng)
    st.baselines = {tuple(p): float(b) for p, b in d["baselines"]}
    for p, k, clock, entries in d["queues"]:
        q = PriorityQueue(k)
        q._clock = clock
        q.entries = {tuple(s): (float(r), int(c)) for s, r, c in entries}
        st.queues[tuple(p)] = q
    st.pair_trials = {tuple(p): int(n) for p, n in d["pair_trials"]}
    st.reject_rate = {tuple(p): float(x) for p, x in d.get("reject_rate", [])}
    st.trials = int(d["trials"])
    return st


def save_checkpoint(policy: Policy, path: str | Path, adam: AdamState | None = None,
                    state: TrainState | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename).

    ``state`` implies its optimizer unless ``adam`` is given explicitly.
    """
    theta = policy.theta
    arrays = named_arrays(theta)
    if adam is None and state is not None:
        adam = state.adam
    if adam is not None:
        for k in sorted(adam.m):
            arrays[f"adam.m/{k}"] = adam.m[k]
            arrays[f"adam.v/{k}"] = adam.v[k]
    entries, offset, chunks = [], 0, []
    for key, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"key": key, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    manifest = {
        "format_version": VERSION,
        "fingerprint": model_fingerprint(),
        "vocab": {"states": theta.states, "actions": [list(a) for a in theta.actions], "tasks": theta.tasks},
        "tensors": entries,
        "adam": None if adam is None else {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                                           "eps": adam.eps, "t": adam.t, "keys": sorted(adam.m)},
        "train_state": None if state is None else _train_state_json(state),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEAD.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (reader supports {VERSION})")
    try:
        manifest = json.loads(raw[_HEAD.size:_HEAD.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEAD.size + n) \
        if (len(raw) - _HEAD.size - n) % 8 == 0 else None
    if payload is None:
        raise CheckpointError(f"{path}: payload is not a whole number of float64 values")
    arrays = {}
    for e in manifest.get("tensors", []):
        size = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: payload too short for {e['key']}")
        arrays[e["key"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return Checkpoint(manifest, arrays)


def _tables_from(ckpt_rows: dict[str, np.ndarray], states, actions, tasks, fresh) -> dict[str, np.ndarray]:
    """Assemble table tensors for a vocabulary; ``fresh(kind, n)`` fills unknown rows."""
    def table(keys, kind, width):
        out = np.empty((len(keys), width))
        missing = [i for i, k in enumerate(keys) if k not in ckpt_rows]
        init = fresh(kind, len(missing)) if missing else None
        j = 0
        for i, k in enumerate(keys):
            if k in ckpt_rows:
                out[i] = ckpt_rows[k]
            else:
                out[i] = init[j]
                j += 1
        return out

    heads = table([_head_key(s) for s in states], "head", D_MODEL + 1)
    return {
        "state_emb": table([_state_key(s) for s in states], "embed", EMBED_DIM),
        "action_emb": table([_action_key(s, a) for s, a in actions], "embed", EMBED_DIM),
        "task_emb": table([_task_key(t) for t in tasks], "embed", EMBED_DIM),
        "head_w": heads[:, :D_MODEL].copy(),
        "head_b": heads[:, D_MODEL].copy(),
    }


def _check_dims(ckpt: Checkpoint) -> None:
    if ckpt.manifest.get("fingerprint") != model_fingerprint():
        raise CheckpointError("checkpoint model dimensions differ from this build (d_model mismatch)")


def restore(ckpt: Checkpoint, with_optimizer: bool = True) -> tuple[Policy, AdamState | None, TrainState | None]:
    """Rebuild exactly what was saved: same vocabulary, optimizer, and training state."""
    _check_dims(ckpt)
    states, actions, tasks = ckpt.vocab

    def nofresh(kind, n):
        raise CheckpointError("checkpoint is missing embedding rows for its own vocabulary")

    tensors = {k: ad.param(v, k) for k, v in
               _tables_from(ckpt.arrays, states, actions, tasks, nofresh).items()}
    for k, v in ckpt.arrays.items():
        if "/" not in k:
            tensors[k] = ad.param(v, k)
    order = ["state_emb", "action_emb", "task_emb", "pos"]
    ordered = {k: tensors[k] for k in order}
    ordered.update({k: v for k, v in tensors.items() if k not in ordered and k not in ("head_w", "head_b")})
    ordered["head_w"] = tensors["head_w"]
    ordered["head_b"] = tensors["head_b"]
    policy = Policy(PolicyParams(states, actions, tasks, ordered))
    adam = None
    meta = ckpt.manifest.get("adam")
    if with_optimizer and meta is not None:
        adam = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"])
        for k in meta["keys"]:
            adam.m[k] = ckpt.arrays[f"adam.m/{k}"].copy()
            adam.v[k] = ckpt.arrays[f"adam.v/{k}"].copy()
    state = None
    ts = ckpt.manifest.get("train_state")
    if with_optimizer and ts is not None:
        state = _train_state_from_json(ts, adam if adam is not None else AdamState())
    return policy, adam, state


@dataclass
class RemapReport:
    reused: list[str] = field(default_factory=list)
    new: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    @property
    def new_states(self) -> list[str]:
        return [k[len("state/"):] for k in self.new if k.startswith("state/")]

    @property
    def reused_states(self) -> list[str]:
        return [k[len("state/"):] for k in self.reused if k.startswith("state/")]

    def lines(self) -> list[str]:
        return ([f"reused {k}" for k in self.reused] + [f"new {k}" for k in self.new]
                + [f"dropped {k}" for k in self.dropped])


def load_with_remap(ckpt: Checkpoint, space: MergedSpace, rng: np.random.Generator) -> tuple[Policy, RemapReport]:
    """Load into ``space``: reuse rows whose names match, initialise the rest.

    Encoder and positional weights are always reused. The optimizer is not
    restored.
    """
    _check_dims(ckpt)
    states, actions, tasks = PolicyParams.vocab_for(space)

    def fresh(kind, n):
        if kind == "embed":
            return _embed_init(rng, n)
        w = init_head_w(rng, n)
        return np.concatenate([w, np.zeros((n, 1))], axis=1)

    tables = _tables_from(ckpt.arrays, states, actions, tasks, fresh)
    tensors = {k: ad.param(tables[k], k) for k in ("state_emb", "action_emb", "task_emb")}
    for k, v in ckpt.arrays.items():
        if "/" not in k:
            tensors[k] = ad.param(v, k)
    tensors["head_w"] = ad.param(tables["head_w"], "head_w")
    tensors["head_b"] = ad.param(tables["head_b"], "head_b")
    new_keys = ([_state_key(s) for s in states] + [_action_key(s, a) for s, a in actions]
                + [_task_key(t) for t in tasks] + [_head_key(s) for s in states])
    saved = {k for k in ckpt.arrays if k.split("/")[0] in ("state", "action", "task", "head")}
    report = RemapReport(
        reused=[k for k in new_keys if k in saved],
        new=[k for k in new_keys if k not in saved],
        dropped=sorted(saved - set(new_keys)),
    )
    return Policy(PolicyParams(states, actions, tasks, tensors)), report
