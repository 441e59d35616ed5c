"""Conditional search spaces: definitions, the DSL front-end, merging, and
NAS-Bench-style genotype decoding/validation.

A search space is a chain of named states. Merging several spaces yields a
single conditional space with a start state ``S`` whose actions select the
member space; states with equal names are stored once so that their
embeddings are shared.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, Sequence

START = "S"
TERMINAL = "T"

OP_NAMES = ("conv3x3", "conv1x1", "maxpool3x3")
OP_INDEX = {name: i + 1 for i, name in enumerate(OP_NAMES)}
MAX_EDGES = 9


class SpaceError(ValueError):
    pass


class DslError(SpaceError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


class MergeConflict(SpaceError):
    pass


@dataclass(frozen=True)
class StateDef:
    name: str
    actions: tuple[str, ...]

    def __post_init__(self):
        if not self.name:
            raise SpaceError("state name must be non-empty")
        if not self.actions:
            raise SpaceError(f"state {self.name!r} has no actions")
        if len(set(self.actions)) != len(self.actions):
            raise SpaceError(f"state {self.name!r} has duplicate action names")


@dataclass(frozen=True)
class SearchSpaceDef:
    id: str
    states: tuple[StateDef, ...]
    # state name -> available subset, in the state's own action order
    allowed: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        seen = set()
        for s in self.states:
            if s.name in seen:
                raise SpaceError(f"space {self.id!r}: state {s.name!r} appears twice (cyclic conditioning)")
            seen.add(s.name)
        for s in self.states:
            acts = self.allowed.get(s.name, s.actions)
            if not acts:
                raise SpaceError(f"space {self.id!r}: state {s.name!r} has no available action")
            unknown = set(acts) - set(s.actions)
            if unknown:
                raise SpaceError(f"space {self.id!r}: unknown actions {sorted(unknown)} for {s.name!r}")

    def available(self, state: str) -> tuple[str, ...]:
        for s in self.states:
            if s.name == state:
                allowed = set(self.allowed.get(state, s.actions))
                return tuple(a for a in s.actions if a in allowed)
        raise SpaceError(f"state {state!r} not in space {self.id!r}")

    @property
    def state_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.states)


Pair = tuple[str, str]


@dataclass(frozen=True)
class MergedSpace:
    spaces: dict[str, SearchSpaceDef]
    pairs: tuple[Pair, ...]

    def __post_init__(self):
        if not self.pairs:
            raise SpaceError("pair set is empty")
        if len(set(self.pairs)) != len(self.pairs):
            raise SpaceError("duplicate (space, task) pairs")
        for sp, _ in self.pairs:
            if sp not in self.spaces:
                raise SpaceError(f"pair references unknown space {sp!r}")

    @cached_property
    def states(self) -> dict[str, StateDef]:
        """All states keyed by name, ``S`` first."""
        out = {START: StateDef(START, tuple(self.spaces))}
        for sp in self.spaces.values():
            for s in sp.states:
                if s.name == START:
                    raise MergeConflict(f"state name {START!r} is reserved")
                prev = out.get(s.name)
                if prev is None:
                    out[s.name] = s
                elif prev.actions != s.actions:
                    raise MergeConflict(
                        f"state {s.name!r} declared with {prev.actions} and {s.actions}")
        return out

    @cached_property
    def tasks(self) -> tuple[str, ...]:
        return tuple(sorted({t for _, t in self.pairs}))

    @cached_property
    def _chains(self) -> dict[Pair, tuple[tuple[str, tuple[str, ...]], ...]]:
        out = {}
        for pair in self.pairs:
            sp = self.spaces[pair[0]]
            out[pair] = tuple((s.name, sp.available(s.name)) for s in sp.states)
        return out

    def chain(self, pair: Pair) -> list[tuple[str, tuple[str, ...]]]:
        """Non-start decisions for ``pair``: (state name, available actions)."""
        if pair not in self.pairs:
            raise SpaceError(f"pair {pair} not in pair set")
        return list(self._chains[pair])

    def chain_length(self, pair: Pair) -> int:
        return len(self.spaces[pair[0]].states)

    def available_actions(self, pair: Pair, history: Sequence[str]) -> tuple[str, tuple[str, ...]]:
        """Current state and its available actions after ``history``.

        ``history[0]`` is the action taken in ``S`` (the space id). Returns
        ``(TERMINAL, ())`` once the chain is complete.
        """
        if not history:
            return START, tuple(self.spaces)
        if history[0] != pair[0]:
            raise SpaceError(f"history starts with {history[0]!r}, expected space {pair[0]!r}")
        chain = self.chain(pair)
        steps = len(history) - 1
        if steps > len(chain):
            raise SpaceError(f"history longer than the chain of {pair}")
        for (name, acts), a in zip(chain, history[1:]):
            if a not in acts:
                raise SpaceError(f"action {a!r} not available in state {name!r} for {pair}")
        if steps == len(chain):
            return TERMINAL, ()
        return chain[steps]


def merge(spaces: Iterable[SearchSpaceDef | MergedSpace], pairs: Iterable[Pair]) -> MergedSpace:
    members: dict[str, SearchSpaceDef] = {}
    all_pairs: list[Pair] = []
    for sp in spaces:
        if isinstance(sp, MergedSpace):
            members.update(sp.spaces)
            all_pairs.extend(sp.pairs)
        else:
            members[sp.id] = sp
    if not members:
        raise SpaceError("merge needs at least one space")
    for p in pairs:
        all_pairs.append(tuple(p))
    uniq = tuple(dict.fromkeys(all_pairs))
    m = MergedSpace(members, uniq)
    m.states  # surface name conflicts now
    return m


# --- DSL -------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<comment>\#.*)
  | (?P<string>"[^"\n]*")
  | (?P<name>[A-Za-z0-9_][A-Za-z0-9_\-+]*(?:\[[0-9, ]*\])?)
  | (?P<punct>[{}\[\]=,.])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(line: str, lineno: int) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise DslError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind == "string":
            toks.append(_Tok("name", m.group()[1:-1], lineno, pos + 1))
        elif kind in ("name", "punct"):
            toks.append(_Tok(kind, m.group(), lineno, pos + 1))
        pos = m.end()
    return toks


class _Parser:
    def __init__(self, toks: list[_Tok], lineno: int, eol: int):
        self.toks, self.i, self.lineno, self.eol = toks, 0, lineno, eol

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def fail(self, msg: str):
        t = self.peek()
        raise DslError(msg, self.lineno, t.col if t else self.eol)

    def name(self) -> _Tok:
        t = self.peek()
        if t is None or t.kind != "name":
            self.fail("expected a name")
        self.i += 1
        return t

    def punct(self, p: str) -> None:
        t = self.peek()
        if t is None or t.kind != "punct" or t.text != p:
            self.fail(f"expected {p!r}")
        self.i += 1

    def name_list(self, open_: str, close: str) -> list[_Tok]:
        self.punct(open_)
        out = []
        t = self.peek()
        if t is not None and t.kind == "punct" and t.text == close:
            self.i += 1
            return out
        while True:
            out.append(self.name())
            t = self.peek()
            if t is not None and t.kind == "punct" and t.text == ",":
                self.i += 1
                continue
            self.punct(close)
            return out

    def end(self) -> None:
        if self.peek() is not None:
            self.fail("unexpected trailing input")


@dataclass
class SpaceDocument:
    states: dict[str, StateDef]
    spaces: dict[str, SearchSpaceDef]
    pairs: list[Pair]

    def merged(self) -> MergedSpace:
        return merge(self.spaces.values(), self.pairs)


def parse_spaces(text: str) -> SpaceDocument:
    """Parse a search-space document (grammar in docs/dsl.md)."""
    states: dict[str, StateDef] = {}
    chains: dict[str, list[_Tok]] = {}
    restricts: dict[str, dict[str, tuple[str, ...]]] = {}
    pairs: list[Pair] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokenize(raw, lineno)
        if not toks:
            continue
        p = _Parser(toks, lineno, len(raw) + 1)
        kw = p.name()
        if kw.text == "state":
            nm = p.name()
            acts = p.name_list("{", "}")
            p.end()
            if not acts:
                raise DslError(f"state {nm.text!r} has an empty action list", lineno, nm.col)
            names = [a.text for a in acts]
            if len(set(names)) != len(names):
                raise DslError(f"duplicate action in state {nm.text!r}", lineno, nm.col)
            if nm.text in states:
                raise DslError(f"state {nm.text!r} declared twice", lineno, nm.col)
            if nm.text == START:
                raise DslError(f"state name {START!r} is reserved", lineno, nm.col)
            states[nm.text] = StateDef(nm.text, tuple(names))
        elif kw.text == "space":
            sid = p.name()
            p.punct("=")
            refs = p.name_list("[", "]")
            p.end()
            if sid.text in chains:
                raise DslError(f"space {sid.text!r} declared twice", lineno, sid.col)
            seen = set()
            for r in refs:
                if r.text not in states:
                    raise DslError(f"unknown state {r.text!r}", lineno, r.col)
                if r.text in seen:
                    raise DslError(f"state {r.text!r} repeated (cyclic conditioning)", lineno, r.col)
                seen.add(r.text)
            if not refs:
                raise DslError(f"space {sid.text!r} is empty", lineno, sid.col)
            chains[sid.text] = refs
            restricts[sid.text] = {}
        elif kw.text == "restrict":
            sid = p.name()
            p.punct(".")
            st = p.name()
            to = p.name()
            if to.text != "to":
                raise DslError("expected 'to'", lineno, to.col)
            acts = p.name_list("{", "}")
            p.end()
            if sid.text not in chains:
                raise DslError(f"unknown space {sid.text!r}", lineno, sid.col)
            if st.text not in {r.text for r in chains[sid.text]}:
                raise DslError(f"state {st.text!r} is not in space {sid.text!r}", lineno, st.col)
            if not acts:
                raise DslError("restriction leaves no action", lineno, st.col)
            for a in acts:
                if a.text not in states[st.text].actions:
                    raise DslError(f"unknown action {a.text!r} for state {st.text!r}", lineno, a.col)
            restricts[sid.text][st.text] = tuple(a.text for a in acts)
        elif kw.text == "pair":
            sid = p.name()
            task = p.name()
            p.end()
            if sid.text not in chains:
                raise DslError(f"unknown space {sid.text!r}", lineno, sid.col)
            if (sid.text, task.text) in pairs:
                raise DslError("duplicate pair", lineno, sid.col)
            pairs.append((sid.text, task.text))
        else:
            raise DslError(f"unknown statement {kw.text!r}", lineno, kw.col)
    spaces = {
        sid: SearchSpaceDef(sid, tuple(states[r.text] for r in refs), restricts[sid])
        for sid, refs in chains.items()
    }
    return SpaceDocument(states, spaces, pairs)


def define_space(text: str) -> SearchSpaceDef:
    doc = parse_spaces(text)
    if len(doc.spaces) != 1:
        raise SpaceError(f"expected exactly one space, found {len(doc.spaces)}")
    return next(iter(doc.spaces.values()))


def load_merged(text: str) -> MergedSpace:
    return parse_spaces(text).merged()


# --- NAS-Bench-style genotypes ----------------------------------------------

def edge_list(num_vertices: int = 7) -> list[tuple[int, int]]:
    """Upper-triangular edges (i, j), i < j, 1-based, lexicographic."""
    return list(combinations(range(1, num_vertices + 1), 2))


def edge_state(i: int, j: int) -> str:
    return f"Edge[{i},{j}]"


def op_state(v: int) -> str:
    return f"Op[{v}]"


_EDGE_RE = re.compile(r"^Edge\[(\d+),(\d+)\]$")
_OP_RE = re.compile(r"^Op\[(\d+)\]$")


@dataclass(frozen=True)
class Genotype:
    edges: tuple[int, ...]
    ops: tuple[int, ...]

    @property
    def num_vertices(self) -> int:
        return len(self.ops) + 2

    def adjacency(self) -> list[list[int]]:
        n = self.num_vertices
        out = [[] for _ in range(n + 1)]
        for (i, j), bit in zip(edge_list(n), self.edges):
            if bit:
                out[i].append(j)
        return out

    def key(self) -> str:
        return "".join(str(b) for b in self.edges) + ";" + "".join(str(o) for o in self.ops)

    @classmethod
    def from_key(cls, key: str) -> "Genotype":
        try:
            e, o = key.strip().split(";")
        except ValueError:
            raise SpaceError(f"malformed genotype key {key!r}") from None
        n = len(o) + 2
        if len(e) != n * (n - 1) // 2 or set(e) - {"0", "1"} or set(o) - {"1", "2", "3"}:
            raise SpaceError(f"malformed genotype key {key!r}")
        return cls(tuple(int(c) for c in e), tuple(int(c) for c in o))

    @property
    def edge_count(self) -> int:
        return sum(self.edges)


def has_path(g: Genotype) -> bool:
    """Breadth-first search from vertex 1 to the output vertex."""
    adj = g.adjacency()
    n = g.num_vertices
    seen, queue = {1}, deque([1])
    while queue:
        u = queue.popleft()
        if u == n:
            return True
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return False


def validate(g: Genotype, max_edges: int = MAX_EDGES) -> bool:
    return g.edge_count <= max_edges and has_path(g)


def decode(m: MergedSpace, pair: Pair, actions: Sequence[str], num_vertices: int = 7) -> Genotype:
    """Map a terminal trajectory (without the forced start action) to a genotype.

    States absent from the pair's space leave their edge bit at 0 and their
    op at conv3x3.
    """
    chain = m.chain(pair)
    if len(actions) != len(chain):
        raise SpaceError(f"trajectory has {len(actions)} actions, chain needs {len(chain)}")
    index = {e: k for k, e in enumerate(edge_list(num_vertices))}
    edges = [0] * len(index)
    ops = [1] * (num_vertices - 2)
    for (name, acts), a in zip(chain, actions):
        if a not in acts:
            raise SpaceError(f"action {a!r} not available in {name!r}")
        if mt := _EDGE_RE.match(name):
            edges[index[(int(mt[1]), int(mt[2]))]] = int(a)
        elif mt := _OP_RE.match(name):
            ops[int(mt[1]) - 2] = OP_INDEX[a]
        else:
            raise SpaceError(f"state {name!r} has no genotype meaning")
    return Genotype(tuple(edges), tuple(ops))


def actions_for(m: MergedSpace, pair: Pair, g: Genotype) -> list[str]:
    """Inverse of :func:`decode` for genotypes expressible in the pair's space."""
    index = {e: k for k, e in enumerate(edge_list(g.num_vertices))}
    out = []
    for name, acts in m.chain(pair):
        if mt := _EDGE_RE.match(name):
            a = str(g.edges[index[(int(mt[1]), int(mt[2]))]])
        elif mt := _OP_RE.match(name):
            a = OP_NAMES[g.ops[int(mt[1]) - 2] - 1]
        else:
            raise SpaceError(f"state {name!r} has no genotype meaning")
        if a not in acts:
            raise SpaceError(f"genotype not expressible in {pair}: {name}={a}")
        out.append(a)
    return out
