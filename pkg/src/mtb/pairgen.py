"""Blank substitution and positive / negative statement-pair generation."""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import io
from .corpus import RelationStatement, Span
from .tokens import BLANK_ID

log = logging.getLogger(__name__)

POSITIVE = "positive"
HARD_NEGATIVE = "hard_negative"
UNIFORM_NEGATIVE = "uniform_negative"
KINDS = (POSITIVE, HARD_NEGATIVE, UNIFORM_NEGATIVE)


@dataclass(frozen=True)
class BlankedStatement:
    base: RelationStatement
    blank1: bool
    blank2: bool
    x: tuple[int, ...]
    s1: Span
    s2: Span
    statement_id: int = -1

    @property
    def e1(self) -> str:
        return self.base.e1

    @property
    def e2(self) -> str:
        return self.base.e2

    def unblank(self) -> tuple[int, ...]:
        """Substitute the original mentions back in."""
        x = list(self.x)
        (i, j), (k, l) = self.base.s1, self.base.s2
        if self.blank2:
            x[self.s2[0] : self.s2[1]] = self.base.x[k:l]
        if self.blank1:
            x[self.s1[0] : self.s1[1]] = self.base.x[i:j]
        return tuple(x)

    def to_json(self) -> dict:
        return {
            "x": list(self.x),
            "s1": list(self.s1),
            "s2": list(self.s2),
            "e1": self.e1,
            "e2": self.e2,
            "blank1": self.blank1,
            "blank2": self.blank2,
            "statement": self.statement_id,
            "source": list(self.base.source),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "BlankedStatement":
        # The base statement is not stored in full; keep enough for labels.
        base = RelationStatement(
            x=tuple(rec["x"]),
            s1=tuple(rec["s1"]),
            s2=tuple(rec["s2"]),
            e1=str(rec["e1"]),
            e2=str(rec["e2"]),
            source=(str(rec["source"][0]), int(rec["source"][1])),
        )
        return cls(base, bool(rec["blank1"]), bool(rec["blank2"]), base.x, base.s1, base.s2, int(rec["statement"]))


def apply_blanks(st: RelationStatement, blank1: bool, blank2: bool, statement_id: int = -1) -> BlankedStatement:
    (i, j), (k, l) = st.s1, st.s2
    x = list(st.x)
    if blank2:
        x[k:l] = [BLANK_ID]
        l = k + 1
    if blank1:
        x[i:j] = [BLANK_ID]
        shift = (j - i) - 1
        j = i + 1
        k, l = k - shift, l - shift
    return BlankedStatement(st, blank1, blank2, tuple(x), (i, j), (k, l), statement_id)


def blank(statement: RelationStatement, alpha: float, rng: np.random.Generator, statement_id: int = -1) -> BlankedStatement:
    """Keep each span with probability ``alpha``; otherwise replace it by one [BLANK].

    Exactly two uniform draws are consumed, span 1 first.
    """
    keep1 = rng.random() < alpha
    keep2 = rng.random() < alpha
    return apply_blanks(statement, not keep1, not keep2, statement_id)


@dataclass(frozen=True)
class StatementPair:
    a: BlankedStatement
    b: BlankedStatement
    label: int
    kind: str

    def to_json(self) -> dict:
        return {"a": self.a.to_json(), "b": self.b.to_json(), "label": self.label, "kind": self.kind}

    @classmethod
    def from_json(cls, rec: dict) -> "StatementPair":
        pair = cls(BlankedStatement.from_json(rec["a"]), BlankedStatement.from_json(rec["b"]), int(rec["label"]), str(rec["kind"]))
        if pair.label != pair_label(pair.a.base, pair.b.base) or pair.kind not in KINDS:
            raise ValueError("label or kind inconsistent with entity ids")
        return pair


@dataclass
class PairGenConfig:
    alpha: float = 0.7
    pos_fraction: float = 0.5
    hard_fraction: float = 1.0
    seed: int = 0
    max_pairs: int = 10_000
    exclude_same_doc: bool = False

    def __post_init__(self):
        for name in ("alpha", "pos_fraction", "hard_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_pairs < 0:
            raise ValueError("max_pairs must be >= 0")


def pair_label(a: RelationStatement, b: RelationStatement) -> int:
    return int(a.e1 == b.e1 and a.e2 == b.e2)


def pair_kind(a: RelationStatement, b: RelationStatement) -> str:
    """Kind implied by entity ids alone (uniform negatives are a sampling provenance)."""
    m1, m2 = a.e1 == b.e1, a.e2 == b.e2
    if m1 and m2:
        return POSITIVE
    if m1 != m2:
        return HARD_NEGATIVE
    return UNIFORM_NEGATIVE


class PairIndex:
    """Statement ids grouped by ordered entity pair and by each slot."""

    def __init__(self, statements: Sequence[RelationStatement]):
        self.statements = statements
        self.by_pair: dict[tuple[str, str], list[int]] = {}
        self.by_e1: dict[str, list[int]] = {}
        self.by_e2: dict[str, list[int]] = {}
        for idx, st in enumerate(statements):
            self.by_pair.setdefault((st.e1, st.e2), []).append(idx)
            self.by_e1.setdefault(st.e1, []).append(idx)
            self.by_e2.setdefault(st.e2, []).append(idx)

    def __len__(self) -> int:
        return len(self.statements)

    def hard_candidates(self, idx: int) -> list[int]:
        """Ids sharing exactly one slot-wise entity with statement ``idx``."""
        st = self.statements[idx]
        cands = set(self.by_e1[st.e1]) ^ set(self.by_e2[st.e2])
        return sorted(cands)

    def positive_pairs(self) -> Iterator[tuple[int, int]]:
        for ids in self.by_pair.values():
            yield from combinations(ids, 2)

    def hard_pairs(self) -> Iterator[tuple[int, int]]:
        for groups in (self.by_e1, self.by_e2):
            for ids in groups.values():
                for i, j in combinations(ids, 2):
                    if pair_label(self.statements[i], self.statements[j]) == 0:
                        yield (i, j)

    # Group weights for uniform sampling over unordered pairs.

    def _positive_groups(self):
        groups = [ids for ids in self.by_pair.values() if len(ids) >= 2]
        weights = [len(g) * (len(g) - 1) // 2 for g in groups]
        return groups, weights

    def _hard_groups(self):
        groups, weights = [], []
        for slot_groups in (self.by_e1, self.by_e2):
            for ids in slot_groups.values():
                n = len(ids)
                if n < 2:
                    continue
                counts: dict[tuple[str, str], int] = {}
                for i in ids:
                    key = (self.statements[i].e1, self.statements[i].e2)
                    counts[key] = counts.get(key, 0) + 1
                same = sum(c * (c - 1) // 2 for c in counts.values())
                if n * (n - 1) // 2 > same:
                    # weight by all pairs: rejecting matching pairs then leaves
                    # every hard pair equally likely
                    groups.append(ids)
                    weights.append(n * (n - 1) // 2)
        return groups, weights


def index_by_pair(statements: Sequence[RelationStatement]) -> PairIndex:
    return PairIndex(statements)


def all_pairs(statements: Sequence[RelationStatement]) -> list[tuple[int, int, int, str]]:
    """Every unordered pair ``(i, j, label, kind)`` with ``i < j``."""
    return [
        (i, j, pair_label(statements[i], statements[j]), pair_kind(statements[i], statements[j]))
        for i, j in combinations(range(len(statements)), 2)
    ]


class _GroupSampler:
    """Uniform sampling over the pairs of a weighted family of id groups."""

    def __init__(self, groups, weights):
        self.groups = groups
        self.cum = np.cumsum(weights, dtype=np.int64)
        self.total = int(self.cum[-1]) if len(self.cum) else 0

    def group(self, rng: np.random.Generator) -> list[int]:
        r = int(rng.integers(self.total))
        return self.groups[bisect.bisect_right(self.cum, r)]


def _two_distinct(ids: Sequence[int], rng: np.random.Generator) -> tuple[int, int]:
    p = int(rng.integers(len(ids)))
    q = int(rng.integers(len(ids) - 1))
    if q >= p:
        q += 1
    return ids[p], ids[q]


def generate_pairs(statements: Sequence[RelationStatement], config: PairGenConfig) -> Iterator[StatementPair]:
    """Sample ``config.max_pairs`` blanked statement pairs.

    The number of positives is ``round(pos_fraction * max_pairs)``; the
    negatives are split ``hard_fraction : 1 - hard_fraction`` between pairs
    sharing exactly one slot-wise entity and uniformly drawn non-matching
    pairs. Kinds are emitted in a seeded random order and each side of every
    pair is blanked independently.
    """
    if config.max_pairs == 0:
        return iter(())
    if len(statements) < 2:
        raise ValueError("need at least 2 statements to form pairs")
    rng = np.random.default_rng(config.seed)
    index = PairIndex(statements)
    n_pos = int(round(config.pos_fraction * config.max_pairs))
    n_neg = config.max_pairs - n_pos
    n_hard = int(round(config.hard_fraction * n_neg))
    n_uni = n_neg - n_hard

    pos = _GroupSampler(*index._positive_groups())
    if n_pos and pos.total == 0:
        raise ValueError("positives requested but no entity pair occurs twice")
    hard = _GroupSampler(*index._hard_groups())
    if n_hard and hard.total == 0:
        log.warning("no statement pairs share exactly one entity; drawing uniform negatives instead")
        n_uni += n_hard
        n_hard = 0
    if n_uni and len(index.by_pair) == 1:
        raise ValueError("negatives requested but every statement pair matches")
    return _emit(statements, config, rng, pos, hard, n_pos, n_hard, n_uni)


def _emit(statements, config, rng, pos, hard, n_pos, n_hard, n_uni) -> Iterator[StatementPair]:
    kinds = np.array([0] * n_pos + [1] * n_hard + [2] * n_uni, dtype=np.int8)
    kinds = kinds[rng.permutation(len(kinds))]
    same_doc = config.exclude_same_doc

    def ok(i: int, j: int) -> bool:
        return not (same_doc and statements[i].source[0] == statements[j].source[0])

    def draw(kind: int) -> tuple[int, int]:
        for _ in range(10_000):
            if kind == 0:
                i, j = _two_distinct(pos.group(rng), rng)
                good = True
            elif kind == 1:
                i, j = _two_distinct(hard.group(rng), rng)
                good = pair_label(statements[i], statements[j]) == 0
            else:
                i, j = _two_distinct(range(len(statements)), rng)
                good = pair_label(statements[i], statements[j]) == 0
            if good and ok(i, j):
                return i, j
        raise ValueError(f"could not sample a {KINDS[kind]} pair satisfying the constraints")

    for kind in kinds:
        i, j = draw(int(kind))
        a = blank(statements[i], config.alpha, rng, i)
        b = blank(statements[j], config.alpha, rng, j)
        yield StatementPair(a, b, pair_label(statements[i], statements[j]), KINDS[kind])


def read_pairs(path: str | Path) -> list[StatementPair]:
    out = []
    for lineno, rec in io.read_jsonl(path, "mtb.pairs"):
        try:
            out.append(StatementPair.from_json(rec))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise io.FormatError(f"bad pair record ({exc})", str(path), lineno) from None
    return out


def write_pairs(path: str | Path, pairs: Iterable[StatementPair]) -> int:
    return io.write_jsonl(path, "mtb.pairs", (p.to_json() for p in pairs))
