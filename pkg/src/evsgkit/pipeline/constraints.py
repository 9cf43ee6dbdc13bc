"""Rule-based temporal/logical constraints applied after refinement.

Three passes over a graph:

1. mutual exclusion: two triplets in one event with the same subject and
   object whose relations are declared exclusive; the later-listed one is
   dropped (there is no per-triplet confidence to break ties with).
2. causal order: a prerequisite relation whose first occurrence for a
   subject comes after the first occurrence of its consequent. Report only.
3. state persistence: a state triplet in event i is copied into event i+1
   unless event i+1 terminates it, changes it, or contradicts it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from ..errors import LexiconError
from ..graph import EVSG, Triplet

DEFAULT_LEXICON = Path(__file__).resolve().parent.parent / "data" / "default_lexicon.txt"


def _rel(name: str) -> str:
    return Triplet("x", name, "x").relation


@dataclass(frozen=True)
class ConstraintLexicon:
    exclusion_pairs: frozenset[frozenset[str]] = frozenset()
    state_relations: frozenset[str] = frozenset()
    termination_relations: dict[str, frozenset[str]] = field(default_factory=dict)
    causal_pairs: frozenset[tuple[str, str]] = frozenset()
    propagate_states: bool = True

    def __post_init__(self) -> None:
        for pair in self.exclusion_pairs:
            if len(pair) != 2:
                raise LexiconError(f"exclusion pair needs two distinct relations: {sorted(pair)}")
        for state, terminators in self.termination_relations.items():
            if state in terminators:
                raise LexiconError(f"relation {state!r} cannot terminate itself")

    @classmethod
    def empty(cls) -> ConstraintLexicon:
        return cls()

    def excludes(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.exclusion_pairs

    def terminators(self, state: str) -> frozenset[str]:
        return self.termination_relations.get(state, frozenset())

    def to_text(self) -> str:
        lines = [f"exclude {' '.join(sorted(p))}" for p in sorted(self.exclusion_pairs, key=sorted)]
        lines += [f"state {s}" for s in sorted(self.state_relations)]
        lines += [f"terminate {s} {' '.join(sorted(t))}" for s, t in sorted(self.termination_relations.items())]
        lines += [f"causal {a} {b}" for a, b in sorted(self.causal_pairs)]
        if not self.propagate_states:
            lines.append("option no-propagation")
        return "\n".join(lines) + "\n"


def parse_lexicon(text: str) -> ConstraintLexicon:
    exclusion: set[frozenset[str]] = set()
    states: set[str] = set()
    terminate: dict[str, set[str]] = {}
    causal: set[tuple[str, str]] = set()
    propagate = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        kind = kind.rstrip(":").lower()
        try:
            args = [_rel(a) for a in args]
        except Exception:
            raise LexiconError(f"line {lineno}: bad relation name in {raw!r}") from None
        if kind == "exclude" and len(args) == 2:
            if args[0] == args[1]:
                raise LexiconError(f"line {lineno}: a relation cannot exclude itself")
            exclusion.add(frozenset(args))
        elif kind == "state" and len(args) == 1:
            states.add(args[0])
        elif kind == "terminate" and len(args) >= 2:
            terminate.setdefault(args[0], set()).update(args[1:])
        elif kind == "causal" and len(args) == 2:
            causal.add((args[0], args[1]))
        elif kind == "option" and args == ["no-propagation"]:
            propagate = False
        else:
            raise LexiconError(f"line {lineno}: cannot parse rule {raw.strip()!r}")
    return ConstraintLexicon(
        frozenset(exclusion), frozenset(states),
        {k: frozenset(v) for k, v in terminate.items()}, frozenset(causal), propagate,
    )


def load_lexicon(path: str | os.PathLike | None = None) -> ConstraintLexicon:
    path = Path(path) if path is not None else DEFAULT_LEXICON
    if not path.is_file():
        raise LexiconError(f"lexicon file not found: {path}")
    return parse_lexicon(path.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Violation:
    kind: str      # mutual-exclusion | causal-order | state-propagated
    event: int
    message: str
    triplet: Triplet | None = None
    action: str = "report"  # dropped | added | report

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "event": self.event,
            "kind": self.kind,
            "message": self.message,
            "triplet": list(self.triplet.as_tuple()) if self.triplet else None,
        }


def _exclusion_pass(triplets: Iterable[Triplet], lexicon: ConstraintLexicon, event: int,
                    violations: list[Violation]) -> tuple[Triplet, ...]:
    kept: list[Triplet] = []
    for t in triplets:
        rival = next(
            (k for k in kept
             if k.subject == t.subject and k.object == t.object and lexicon.excludes(k.relation, t.relation)),
            None,
        )
        if rival is None:
            kept.append(t)
            continue
        violations.append(Violation(
            "mutual-exclusion", event,
            f"{t.relation} contradicts {rival.relation} for ({t.subject}, {t.object})", t, "dropped",
        ))
    return tuple(kept)


def _causal_pass(graph: EVSG, lexicon: ConstraintLexicon, violations: list[Violation]) -> None:
    first: dict[tuple[str, str], int] = {}
    for ev in graph.events:
        for t in ev.triplets:
            first.setdefault((t.subject, t.relation), ev.index)
    subjects = sorted({s for s, _ in first})
    for pre, con in sorted(lexicon.causal_pairs):
        for s in subjects:
            i_pre, i_con = first.get((s, pre)), first.get((s, con))
            if i_pre is not None and i_con is not None and i_pre > i_con:
                violations.append(Violation(
                    "causal-order", i_pre,
                    f"{s}: prerequisite {pre} (event {i_pre}) comes after consequent {con} (event {i_con})",
                ))


def _blocks_state(state: Triplet, t: Triplet, lexicon: ConstraintLexicon) -> bool:
    if t.relation in lexicon.terminators(state.relation) and state.subject in (t.subject, t.object):
        return True
    if t.subject == state.subject and t.relation == state.relation and t.object != state.object:
        return True
    return t.subject == state.subject and t.object == state.object and lexicon.excludes(t.relation, state.relation)


def apply_constraints(graph: EVSG, lexicon: ConstraintLexicon) -> tuple[EVSG, list[Violation]]:
    violations: list[Violation] = []
    triplets = [
        _exclusion_pass(ev.triplets, lexicon, ev.index, violations) for ev in graph.events
    ]

    if lexicon.propagate_states and lexicon.state_relations:
        for i in range(len(triplets) - 1):
            nxt = list(triplets[i + 1])
            for state in triplets[i]:
                if state.relation not in lexicon.state_relations or state in nxt:
                    continue
                if any(_blocks_state(state, t, lexicon) for t in nxt):
                    continue
                nxt.append(state)
                violations.append(Violation(
                    "state-propagated", graph.events[i + 1].index,
                    f"state carried over from event {graph.events[i].index}", state, "added",
                ))
            triplets[i + 1] = tuple(nxt)

    events = tuple(replace(ev, triplets=t) for ev, t in zip(graph.events, triplets))
    out = replace(graph, events=events)
    _causal_pass(out, lexicon, violations)
    return out, violations
