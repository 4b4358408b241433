"""Domain types, unlabeled pools, confidence selection and dataset fusion."""
from __future__ import annotations

import enum
import math
import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

_WS = re.compile(r"\s+")


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


def normalize_text(text: str) -> str:
    """NFC, collapse whitespace runs, strip. Case is preserved."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


class Direction(str, enum.Enum):
    SIMPLIFY = "simplify"
    REWRITE = "rewrite"


@dataclass(frozen=True)
class Turn:
    query: str
    rewrite: Optional[str] = None
    answer: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "query", normalize_text(self.query))
        if not self.query:
            raise ContractViolation("turn query is empty")
        if self.rewrite is not None:
            object.__setattr__(self, "rewrite", normalize_text(self.rewrite))
            if not self.rewrite:
                raise ContractViolation("turn rewrite is present but empty")
        if self.answer is not None:
            object.__setattr__(self, "answer", normalize_text(self.answer))


@dataclass(frozen=True)
class Session:
    id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ContractViolation(f"session {self.id!r} has no turns")

    @property
    def queries(self) -> list[str]:
        return [t.query for t in self.turns]


@dataclass(frozen=True)
class LabeledExample:
    """A (history, source, target) triple.

    ``provenance`` tags where the pair came from ("gold", "weak", or the
    direction of the pseudo label that produced it); training code uses it
    to assert that each model only ever sees correctly oriented pairs.
    """

    history: tuple[str, ...]
    source: str
    target: str
    provenance: str = "gold"

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if not self.source or not self.target:
            raise ContractViolation("labeled example needs non-empty source and target")


@dataclass(frozen=True)
class PseudoExample:
    history: tuple[str, ...]
    source: str
    generated: str
    confidence: float
    direction: Direction
    key: Optional[tuple[str, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if not math.isfinite(self.confidence):
            raise ContractViolation(f"non-finite confidence {self.confidence} for {self.source!r}")


@dataclass(frozen=True)
class PoolItem:
    key: tuple[str, int]
    history: tuple[str, ...]
    query: str


@dataclass
class DataPool:
    """Unlabeled sessions; items are (session id, turn index) and only shrink."""

    sessions: list[Session]
    consumed: set[tuple[str, int]] = field(default_factory=set)

    def __post_init__(self):
        ids = [s.id for s in self.sessions]
        if len(ids) != len(set(ids)):
            raise ContractViolation("duplicate session id in pool")
        self._index = {s.id: s for s in self.sessions}

    def items(self) -> Iterator[PoolItem]:
        for s in self.sessions:
            queries = s.queries
            for i, q in enumerate(queries):
                if (s.id, i) not in self.consumed:
                    yield PoolItem((s.id, i), tuple(queries[:i]), q)

    def __len__(self) -> int:
        return sum(len(s.turns) for s in self.sessions) - len(self.consumed)

    def __contains__(self, key) -> bool:
        sid, idx = key
        s = self._index.get(sid)
        return s is not None and 0 <= idx < len(s.turns) and key not in self.consumed

    def copy(self) -> "DataPool":
        return DataPool(list(self.sessions), set(self.consumed))


def select(candidates: Sequence[PseudoExample], threshold: float):
    """Split candidates into (kept, rejected); kept have confidence > threshold."""
    kept, rejected = [], []
    for c in candidates:
        (kept if c.confidence > threshold else rejected).append(c)
    return kept, rejected


def remove_consumed(pool: DataPool, taken: Sequence[PseudoExample]) -> DataPool:
    """Mark ``taken`` items consumed. Raises on unknown or already-removed keys."""
    keys = []
    for ex in taken:
        if ex.key is None or ex.key not in pool:
            raise ContractViolation(f"pool item {ex.key!r} is unknown or already consumed")
        keys.append(ex.key)
    if len(keys) != len(set(keys)):
        raise ContractViolation("the same pool item was taken twice")
    pool.consumed.update(keys)
    return pool


def reverse(ex: LabeledExample) -> LabeledExample:
    return replace(ex, source=ex.target, target=ex.source)


@dataclass(frozen=True)
class SyntheticDataset:
    simplified: tuple[PseudoExample, ...]
    rewritten: tuple[PseudoExample, ...]

    def for_rewriter(self) -> list[LabeledExample]:
        # simplified form -> the fully specified pool query
        return [
            LabeledExample(p.history, p.generated, p.source, provenance=Direction.SIMPLIFY.value)
            for p in self.simplified
        ]

    def for_simplifier(self) -> list[LabeledExample]:
        # model rewrite -> the contextual pool query
        return [
            LabeledExample(p.history, p.generated, p.source, provenance=Direction.REWRITE.value)
            for p in self.rewritten
        ]

    def __len__(self) -> int:
        return len(self.simplified) + len(self.rewritten)


def fuse(p_s: Sequence[PseudoExample], p_r: Sequence[PseudoExample]) -> SyntheticDataset:
    for p in p_s:
        if p.direction is not Direction.SIMPLIFY:
            raise ContractViolation(f"expected SIMPLIFY item in p_s, got {p.direction.value}: {p.source!r}")
    for p in p_r:
        if p.direction is not Direction.REWRITE:
            raise ContractViolation(f"expected REWRITE item in p_r, got {p.direction.value}: {p.source!r}")
    return SyntheticDataset(tuple(p_s), tuple(p_r))
