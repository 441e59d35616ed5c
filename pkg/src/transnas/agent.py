"""Transformer policy over merged conditional search spaces.

Every token is ``action_emb ++ task_emb ++ state_emb`` (8 + 8 + 8 = 24) plus a
learned positional encoding. To score the candidates of one decision, each
candidate token is appended to the tokens already chosen, the sequence is
run through a 2-layer single-head post-LN encoder, and the candidate's output
vector goes through the current state's linear head to a scalar logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .space import START, MergedSpace, Pair, decode, validate

EMBED_DIM = 8
D_MODEL = 3 * EMBED_DIM
NUM_LAYERS = 2
FFN_DIM = 4 * D_MODEL
MAX_LEN = 64
_NEG = -1e30

LAYER_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


class MissingEmbedding(KeyError):
    pass


class SamplingExhausted(RuntimeError):
    def __init__(self, rejects: int):
        super().__init__(f"no valid genotype after {rejects} samples")
        self.rejects = rejects


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _embed_init(rng, n):
    return rng.uniform(-0.1, 0.1, size=(n, EMBED_DIM))


class PolicyParams:
    """All learnable tensors plus the name -> row vocabularies of the tables.

    Tables: ``state_emb``/``head_w``/``head_b`` rows follow ``states``,
    ``action_emb`` rows follow ``actions`` ((state, action) keys),
    ``task_emb`` rows follow ``tasks``.
    """

    def __init__(self, states: list[str], actions: list[tuple[str, str]], tasks: list[str],
                 tensors: dict[str, Tensor]):
        self.states = list(states)
        self.actions = list(actions)
        self.tasks = list(tasks)
        self.tensors = tensors
        self.state_ix = {s: i for i, s in enumerate(self.states)}
        self.action_ix = {a: i for i, a in enumerate(self.actions)}
        self.task_ix = {t: i for i, t in enumerate(self.tasks)}

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def param_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    @classmethod
    def vocab_for(cls, space: MergedSpace) -> tuple[list[str], list[tuple[str, str]], list[str]]:
        states = list(space.states)
        actions = [(s, a) for s, sd in space.states.items() for a in sd.actions]
        return states, actions, list(space.tasks)

    @classmethod
    def init(cls, space: MergedSpace, rng: np.random.Generator) -> "PolicyParams":
        states, actions, tasks = cls.vocab_for(space)
        t: dict[str, Tensor] = {
            "state_emb": ad.param(_embed_init(rng, len(states)), "state_emb"),
            "action_emb": ad.param(_embed_init(rng, len(actions)), "action_emb"),
            "task_emb": ad.param(_embed_init(rng, len(tasks)), "task_emb"),
            "pos": ad.param(rng.uniform(-0.1, 0.1, size=(MAX_LEN, D_MODEL)), "pos"),
        }
        for name, arr in init_encoder(rng).items():
            t[name] = ad.param(arr, name)
        t["head_w"] = ad.param(init_head_w(rng, len(states)), "head_w")
        t["head_b"] = ad.param(np.zeros(len(states)), "head_b")
        return cls(states, actions, tasks, t)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.states, self.actions, self.tasks,
                            {k: ad.param(v.data.copy(), k) for k, v in self.tensors.items()})


def init_encoder(rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    d, f = D_MODEL, FFN_DIM
    for l in range(NUM_LAYERS):
        p = f"enc{l}."
        for w in ("wq", "wk", "wv", "wo"):
            out[p + w] = _glorot(rng, d, d, (d, d))
            out[p + "b" + w[1]] = np.zeros(d)
        out[p + "ln1_g"] = np.ones(d)
        out[p + "ln1_b"] = np.zeros(d)
        out[p + "w1"] = _glorot(rng, d, f, (d, f))
        out[p + "b1"] = np.zeros(f)
        out[p + "w2"] = _glorot(rng, f, d, (f, d))
        out[p + "b2"] = np.zeros(d)
        out[p + "ln2_g"] = np.ones(d)
        out[p + "ln2_b"] = np.zeros(d)
    return out


def init_head_w(rng: np.random.Generator, n: int) -> np.ndarray:
    return _glorot(rng, D_MODEL, 1, (n, D_MODEL))


# --- encoder -----------------------------------------------------------------

@dataclass
class Batch:
    """Padded token index arrays for B sequences of up to L tokens."""
    state: np.ndarray   # (B, L)
    action: np.ndarray  # (B, L)
    task: np.ndarray    # (B, L)
    lengths: np.ndarray  # (B,)
    head: np.ndarray    # (B,) state row whose head scores the last token


def encoder_forward(theta: PolicyParams, batch: Batch, want_attention: bool = False):
    """Logits (B,) for the last real token of every sequence, plus attention maps."""
    B, L = batch.state.shape
    if L > MAX_LEN:
        raise ValueError(f"sequence length {L} exceeds positional table ({MAX_LEN})")
    x = ad.concat([
        ad.embedding_gather(theta["action_emb"], batch.action),
        ad.embedding_gather(theta["task_emb"], batch.task),
        ad.embedding_gather(theta["state_emb"], batch.state),
    ], axis=-1)
    pos = ad.embedding_gather(theta["pos"], np.arange(L))
    x = ad.add(x, pos)
    key_pad = np.arange(L)[None, :] >= batch.lengths[:, None]
    mask = None
    if key_pad.any():
        mask = ad.const(np.where(key_pad, _NEG, 0.0)[:, None, :])
    inv = 1.0 / np.sqrt(D_MODEL)
    maps = []
    for l in range(NUM_LAYERS):
        p = f"enc{l}."
        q = ad.add(ad.matmul(x, theta[p + "wq"]), theta[p + "bq"])
        k = ad.add(ad.matmul(x, theta[p + "wk"]), theta[p + "bk"])
        v = ad.add(ad.matmul(x, theta[p + "wv"]), theta[p + "bv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv)
        if mask is not None:
            scores = ad.add(scores, mask)
        att = ad.softmax(scores, axis=-1)
        if want_attention:
            maps.append(att.data)
        a = ad.add(ad.matmul(ad.matmul(att, v), theta[p + "wo"]), theta[p + "bo"])
        x = ad.layer_norm(ad.add(x, a), theta[p + "ln1_g"], theta[p + "ln1_b"])
        h = ad.relu(ad.add(ad.matmul(x, theta[p + "w1"]), theta[p + "b1"]))
        h = ad.add(ad.matmul(h, theta[p + "w2"]), theta[p + "b2"])
        x = ad.layer_norm(ad.add(x, h), theta[p + "ln2_g"], theta[p + "ln2_b"])
    flat = ad.reshape(x, (B * L, D_MODEL))
    last = ad.embedding_gather(flat, np.arange(B) * L + batch.lengths - 1)
    w = ad.embedding_gather(theta["head_w"], batch.head)
    logits = ad.add(ad.reduce_sum(ad.mul(last, w), axis=-1),
                    ad.embedding_gather(theta["head_b"], batch.head))
    return logits, maps


def _plain_layer_norm(x, gain, bias):
    d = x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * (1.0 / d)
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = np.where(var >= ad.ZERO_VAR, 1.0 / np.sqrt(var + ad.LN_EPS), 0.0)
    return (xc * inv) * gain + bias


def _plain_matmul(x, w):
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def encoder_logits(theta: PolicyParams, batch: Batch, want_attention: bool = False):
    """Same numbers as ``encoder_forward`` on plain arrays, with no graph.

    Sampling needs no gradients, and skipping the tape bookkeeping makes the
    many small forward passes of a trajectory noticeably cheaper. Every array
    operation mirrors the taped one, so the results are bit-identical.
    """
    T = {k: t.data for k, t in theta.tensors.items()}
    B, L = batch.state.shape
    if L > MAX_LEN:
        raise ValueError(f"sequence length {L} exceeds positional table ({MAX_LEN})")
    x = np.concatenate([T["action_emb"][batch.action], T["task_emb"][batch.task],
                        T["state_emb"][batch.state]], axis=-1)
    x = x + T["pos"][np.arange(L)]
    key_pad = np.arange(L)[None, :] >= batch.lengths[:, None]
    mask = np.where(key_pad, _NEG, 0.0)[:, None, :] if key_pad.any() else None
    inv = 1.0 / np.sqrt(D_MODEL)
    maps = []
    for l in range(NUM_LAYERS):
        p = f"enc{l}."
        q = _plain_matmul(x, T[p + "wq"]) + T[p + "bq"]
        k = _plain_matmul(x, T[p + "wk"]) + T[p + "bk"]
        v = _plain_matmul(x, T[p + "wv"]) + T[p + "bv"]
        scores = (q @ np.swapaxes(k, -1, -2)) * inv
        if mask is not None:
            scores = scores + mask
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att = e / e.sum(axis=-1, keepdims=True)
        if want_attention:
            maps.append(att)
        a = _plain_matmul(att @ v, T[p + "wo"]) + T[p + "bo"]
        x = _plain_layer_norm(x + a, T[p + "ln1_g"], T[p + "ln1_b"])
        h = _plain_matmul(x, T[p + "w1"]) + T[p + "b1"]
        h = h * (h > 0)
        h = _plain_matmul(h, T[p + "w2"]) + T[p + "b2"]
        x = _plain_layer_norm(x + h, T[p + "ln2_g"], T[p + "ln2_b"])
    last = x.reshape(B * L, D_MODEL)[np.arange(B) * L + batch.lengths - 1]
    w = T["head_w"][batch.head]
    return (last * w).sum(axis=-1) + T["head_b"][batch.head], maps


# --- distributions -------------------------------------------------------------

@dataclass
class StepDistribution:
    candidates: tuple[str, ...]
    probs: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        if len(self.candidates) != len(self.probs):
            raise ValueError("candidates and probabilities differ in length")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def mix_with_uniform(d: StepDistribution, gamma: float) -> StepDistribution:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    k = len(d.probs)
    p = (1.0 - gamma) * d.probs + gamma / k
    with np.errstate(divide="ignore"):
        return StepDistribution(d.candidates, p, np.log(p))


# --- tokens ----------------------------------------------------------------------

def _lookup(ix: dict, key, kind: str) -> int:
    try:
        return ix[key]
    except KeyError:
        raise MissingEmbedding(f"no {kind} embedding for {key!r}") from None


@dataclass
class StepRecord:
    state: str
    candidates: tuple[str, ...]
    chosen: int
    probs: np.ndarray          # unmixed policy
    mixed: np.ndarray          # distribution actually sampled from
    attention: list[np.ndarray] | None = None  # per layer (L, L) for the chosen candidate


@dataclass
class Trajectory:
    pair: Pair
    actions: list[str]
    steps: list[StepRecord]
    genotype: object = None
    reward: float | None = None
    rejects: int = 0

    @property
    def log_prob(self) -> float:
        """Sum of log-probabilities under the sampling (mixed) distributions."""
        return float(sum(np.log(s.mixed[s.chosen]) for s in self.steps))

    @property
    def entropy(self) -> float:
        ents = [float(-(s.probs * np.log(np.where(s.probs > 0, s.probs, 1.0))).sum()) for s in self.steps]
        return float(np.mean(ents)) if ents else 0.0


class Policy:
    """Parameters plus the operations of the agent."""

    def __init__(self, theta: PolicyParams):
        self.theta = theta

    @classmethod
    def init(cls, space: MergedSpace, rng: np.random.Generator) -> "Policy":
        return cls(PolicyParams.init(space, rng))

    def token(self, pair: Pair, state: str, action: str) -> tuple[int, int, int]:
        th = self.theta
        return (_lookup(th.state_ix, state, "state"),
                _lookup(th.action_ix, (state, action), "action"),
                _lookup(th.task_ix, pair[1], "task"))

    def encode_step(self, pair: Pair, state: str, candidates: Sequence[str],
                    past: Sequence[tuple[int, int, int]], want_attention: bool = False):
        """Distribution over ``candidates`` given the tokens already chosen.

        Returns ``(StepDistribution, maps)`` where ``maps[l]`` has shape
        (k, L, L) for layer ``l``.
        """
        if not candidates:
            raise ValueError("no candidates")
        if len(past) >= MAX_LEN:
            raise ValueError(f"history of {len(past)} tokens exceeds positional table")
        head = _lookup(self.theta.state_ix, state, "state")
        cand = [self.token(pair, state, a) for a in candidates]
        k, L = len(cand), len(past) + 1
        toks = np.empty((k, L, 3), dtype=np.intp)
        if past:
            toks[:, :-1, :] = np.asarray(past, dtype=np.intp)[None]
        toks[:, -1, :] = np.asarray(cand, dtype=np.intp)
        batch = Batch(toks[..., 0], toks[..., 1], toks[..., 2],
                      np.full(k, L, dtype=np.intp), np.full(k, head, dtype=np.intp))
        logits, maps = encoder_forward(self.theta, batch, want_attention)
        z = logits.data
        return StepDistribution(tuple(candidates), _softmax(z), z.copy()), maps

    def sample_trajectory(self, space: MergedSpace, pair: Pair, gamma: float,
                          rng: np.random.Generator, record_attention: bool = False) -> Trajectory:
        return self.sample_batch(space, pair, gamma, rng, 1, record_attention)[0]

    def sample_batch(self, space: MergedSpace, pair: Pair, gamma: float, rng: np.random.Generator,
                     n: int, record_attention: bool = False) -> list[Trajectory]:
        """Sample ``n`` independent trajectories, stepping them in lockstep.

        The first token is the forced start action selecting ``pair``'s space;
        it conditions every later step but has no probability term.
        """
        start = self.token(pair, START, pair[0])
        past = np.empty((n, space.chain_length(pair) + 1, 3), dtype=np.intp)
        past[:, 0] = start
        actions: list[list[str]] = [[] for _ in range(n)]
        steps: list[list[StepRecord]] = [[] for _ in range(n)]
        for m, (state, cands) in enumerate(space.chain(pair), start=1):
            toks = [self.token(pair, state, a) for a in cands]
            k = len(cands)
            if k == 1:
                one = np.ones(1)
                for r in range(n):
                    steps[r].append(StepRecord(state, cands, 0, one, one))
                    actions[r].append(cands[0])
                past[:, m] = toks[0]
                continue
            head = _lookup(self.theta.state_ix, state, "state")
            seq = np.empty((n, k, m + 1, 3), dtype=np.intp)
            seq[:, :, :m] = past[:, None, :m]
            seq[:, :, m] = np.asarray(toks, dtype=np.intp)[None]
            seq = seq.reshape(n * k, m + 1, 3)
            batch = Batch(seq[..., 0], seq[..., 1], seq[..., 2],
                          np.full(n * k, m + 1, dtype=np.intp), np.full(n * k, head, dtype=np.intp))
            z, maps = encoder_logits(self.theta, batch, record_attention)
            z = z.reshape(n, k)
            e = np.exp(z - z.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            if not 0.0 <= gamma <= 1.0:
                raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
            mixed = (1.0 - gamma) * probs + gamma / k
            u = rng.random(n)
            cum = np.cumsum(mixed, axis=1)
            chosen = np.minimum((cum < (u * cum[:, -1])[:, None]).sum(axis=1), k - 1)
            for r in range(n):
                c = int(chosen[r])
                att = [mp[r * k + c] for mp in maps] if record_attention else None
                steps[r].append(StepRecord(state, cands, c, probs[r], mixed[r], att))
                actions[r].append(cands[c])
                past[r, m] = toks[c]
        return [Trajectory(pair, actions[r], steps[r]) for r in range(n)]

    def sample_valid_genotype(self, space: MergedSpace, pair: Pair, gamma: float,
                              rng: np.random.Generator, max_rejects: int = 10_000,
                              num_vertices: int = 7, parallel: int = 4) -> Trajectory:
        """Resample until the decoded genotype is valid; rejected draws are discarded.

        Draws ``parallel`` trajectories per encoder pass and keeps the first
        valid one, which has the same law as drawing one at a time.
        """
        if max_rejects < 1:
            raise ValueError("max_rejects must be >= 1")
        drawn = 0
        while drawn < max_rejects:
            n = min(parallel, max_rejects - drawn)
            for traj in self.sample_batch(space, pair, gamma, rng, n):
                g = decode(space, pair, traj.actions, num_vertices)
                if validate(g):
                    traj.genotype = g
                    traj.rejects = drawn
                    return traj
                drawn += 1
        raise SamplingExhausted(max_rejects)

    def _bucketed_logits(self, rows) -> Tensor:
        """Logits for every row, running length-bucketed padded batches."""
        order = sorted(range(len(rows)), key=lambda r: len(rows[r][0]))
        buckets, cur = [], [order[0]]
        for r in order[1:]:
            if len(rows[r][0]) > 1.5 * len(rows[cur[0]][0]) + 2 and len(cur) >= 8:
                buckets.append(cur)
                cur = []
            cur.append(r)
        buckets.append(cur)
        parts, where = [], np.empty(len(rows), dtype=np.intp)
        offset = 0
        for bucket in buckets:
            L = len(rows[bucket[-1]][0])
            toks = np.zeros((len(bucket), L, 3), dtype=np.intp)
            lengths = np.empty(len(bucket), dtype=np.intp)
            heads = np.empty(len(bucket), dtype=np.intp)
            for b, r in enumerate(bucket):
                seq, head = rows[r]
                toks[b, :len(seq)] = seq
                lengths[b] = len(seq)
                heads[b] = head
                where[r] = offset + b
            offset += len(bucket)
            logits, _ = encoder_forward(
                self.theta, Batch(toks[..., 0], toks[..., 1], toks[..., 2], lengths, heads))
            parts.append(logits)
        cat = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return ad.embedding_gather(cat, where)

    # --- differentiable scoring of whole sequences ---------------------------

    def score(self, space: MergedSpace, items: Sequence[tuple[Pair, Sequence[str]]]):
        """Differentiable log-likelihood and mean step entropy of action sequences.

        Builds one padded batch covering every multi-candidate step of every
        item. Returns ``(logp, entropy)``, lists of scalar tensors, one per
        item. Steps with a single candidate contribute exactly zero to both.
        """
        rows = []              # (tokens, head) per sequence
        step_slots = []        # per step: list of row indices, chosen slot
        step_owner = []        # item index per step
        n_steps = []
        for it, (pair, actions) in enumerate(items):
            chain = space.chain(pair)
            if len(actions) != len(chain):
                raise ValueError(f"sequence of length {len(actions)} for chain of {len(chain)}")
            past = [self.token(pair, START, pair[0])]
            n_steps.append(len(chain))
            for (state, cands), a in zip(chain, actions):
                if a not in cands:
                    raise ValueError(f"action {a!r} not available in {state!r}")
                if len(cands) > 1:
                    head = _lookup(self.theta.state_ix, state, "state")
                    slots = []
                    for c in cands:
                        slots.append(len(rows))
                        rows.append((past + [self.token(pair, state, c)], head))
                    step_slots.append((slots, cands.index(a)))
                    step_owner.append(it)
                past.append(self.token(pair, state, a))
        zero = ad.const(0.0)
        if not rows:
            return [zero for _ in items], [zero for _ in items]
        logits = self._bucketed_logits(rows)
        B = len(rows)
        S = len(step_slots)
        K = max(len(s) for s, _ in step_slots)
        idx = np.full((S, K), B, dtype=np.intp)
        chosen = np.empty(S, dtype=np.intp)
        for s, (slots, c) in enumerate(step_slots):
            idx[s, :len(slots)] = slots
            chosen[s] = s * K + c
        padded = ad.embedding_gather(ad.concat([logits, ad.const([_NEG])], axis=0), idx)
        logp = ad.log_softmax(padded, axis=-1)
        picked = ad.embedding_gather(ad.reshape(logp, (S * K,)), chosen)
        ent = ad.scale(ad.reduce_sum(ad.mul(ad.exp(logp), logp), axis=-1), -1.0)
        owner = np.asarray(step_owner)
        sum_m = np.zeros((len(items), S))
        sum_m[owner, np.arange(S)] = 1.0
        mean_m = sum_m / np.maximum(np.asarray(n_steps, dtype=float), 1.0)[:, None]
        lp = ad.matmul(ad.const(sum_m), ad.reshape(picked, (S, 1)))
        en = ad.matmul(ad.const(mean_m), ad.reshape(ent, (S, 1)))
        lp_items, en_items = [], []
        for i in range(len(items)):
            if (owner == i).any():
                lp_items.append(ad.reshape(ad.embedding_gather(lp, np.array([i])), ()))
                en_items.append(ad.reshape(ad.embedding_gather(en, np.array([i])), ()))
            else:
                lp_items.append(zero)
                en_items.append(zero)
        return lp_items, en_items
