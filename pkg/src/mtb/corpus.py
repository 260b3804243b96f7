"""Relation-statement extraction from entity-linked documents."""
from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import io
from .tokens import CLS_ID, SEP_ID, Vocabulary

Span = tuple[int, int]


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    entity_id: str


@dataclass
class Document:
    doc_id: str
    tokens: list[str]
    mentions: list[Mention] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.tokens)
        for m in self.mentions:
            if not 0 <= m.start < m.end <= n:
                raise ValueError(f"mention {m} out of bounds for document {self.doc_id!r} of length {n}")
        self.mentions = sorted(self.mentions, key=lambda m: (m.start, m.end, m.entity_id))

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "tokens": list(self.tokens),
            "mentions": [{"start": m.start, "end": m.end, "entity_id": m.entity_id} for m in self.mentions],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Document":
        return cls(
            doc_id=str(rec["doc_id"]),
            tokens=list(rec["tokens"]),
            mentions=[Mention(int(m["start"]), int(m["end"]), str(m["entity_id"])) for m in rec["mentions"]],
        )


@dataclass(frozen=True)
class RelationStatement:
    """Token window ``x`` (starting with [CLS], ending with [SEP]) and two spans.

    ``source`` is ``(doc_id, window_offset)``; ``mention_starts`` keeps the
    two mentions' positions in the original document for ordering.
    """

    x: tuple[int, ...]
    s1: Span
    s2: Span
    e1: str
    e2: str
    source: tuple[str, int]
    mention_starts: tuple[int, int] = (0, 0)

    def sort_key(self):
        return (self.source[0], self.source[1], self.mention_starts[0], self.mention_starts[1])

    def to_json(self) -> dict:
        return {
            "x": list(self.x),
            "s1": list(self.s1),
            "s2": list(self.s2),
            "e1": self.e1,
            "e2": self.e2,
            "source": [self.source[0], self.source[1]],
            "mention_starts": list(self.mention_starts),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "RelationStatement":
        st = cls(
            x=tuple(rec["x"]),
            s1=tuple(rec["s1"]),
            s2=tuple(rec["s2"]),
            e1=str(rec["e1"]),
            e2=str(rec["e2"]),
            source=(str(rec["source"][0]), int(rec["source"][1])),
            mention_starts=tuple(rec.get("mention_starts", (0, 0))),
        )
        validate_statement(st)
        return st


def validate_statement(st: RelationStatement) -> None:
    """Raise ValueError unless ``0 < i < j <= k < l <= n`` and x is [CLS] ... [SEP]."""
    (i, j), (k, l) = st.s1, st.s2
    n = len(st.x) - 1
    if n < 1 or st.x[0] != CLS_ID or st.x[n] != SEP_ID:
        raise ValueError("statement must start with [CLS] and end with [SEP]")
    if not (0 < i < j <= k < l <= n):
        raise ValueError(f"invalid spans s1={st.s1} s2={st.s2} for length {len(st.x)}")


def _window(a: Mention, b: Mention, doc_len: int, window: int) -> tuple[int, int] | None:
    lo, hi = min(a.start, b.start), max(a.end, b.end)
    if hi - lo > window:
        return None
    mid2 = lo + hi  # twice the midpoint, keeps arithmetic integral
    start = (mid2 - window) // 2
    start = max(0, min(start, doc_len - window))
    end = min(doc_len, start + window)
    return start, end


def extract_statements(doc: Document, vocab: Vocabulary, window: int = 40) -> list[RelationStatement]:
    """All ordered mention pairs that fit together in ``window`` tokens.

    The window is centred on the midpoint of the pair and clipped to the
    document. Overlapping mentions yield no statement.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    ids = vocab.encode(doc.tokens)
    out = []
    ms = doc.mentions
    for p in range(len(ms)):
        for q in range(p + 1, len(ms)):
            a, b = ms[p], ms[q]
            if a.start < b.end and b.start < a.end:
                continue
            if (b.start, b.end) < (a.start, a.end):
                a, b = b, a
            w = _window(a, b, len(doc.tokens), window)
            if w is None:
                continue
            start, end = w
            x = (CLS_ID, *ids[start:end], SEP_ID)
            out.append(
                RelationStatement(
                    x=x,
                    s1=(a.start - start + 1, a.end - start + 1),
                    s2=(b.start - start + 1, b.end - start + 1),
                    e1=a.entity_id,
                    e2=b.entity_id,
                    source=(doc.doc_id, start),
                    mention_starts=(a.start, b.start),
                )
            )
    out.sort(key=RelationStatement.sort_key)
    return out


def _extract_shard(args):
    docs, vocab_tokens, window = args
    vocab = Vocabulary(vocab_tokens)
    return [st for d in docs for st in extract_statements(d, vocab, window)]


def extract_corpus(docs: Sequence[Document], vocab: Vocabulary, window: int = 40, workers: int = 1) -> list[RelationStatement]:
    """Extract from many documents; output order is independent of ``workers``."""
    if workers <= 1 or len(docs) < 2 * workers:
        out = [st for d in docs for st in extract_statements(d, vocab, window)]
    else:
        size = -(-len(docs) // workers)
        shards = [(docs[i : i + size], vocab.token_of, window) for i in range(0, len(docs), size)]
        with ProcessPoolExecutor(workers) as ex:
            out = [st for part in ex.map(_extract_shard, shards) for st in part]
    out.sort(key=RelationStatement.sort_key)
    return out


def cap_by_entity(statements: Iterable[RelationStatement], cap: int, seed: int) -> list[RelationStatement]:
    """Keep at most ``cap`` statements per entity (either slot).

    Bottom-k reservoir: every statement draws one seeded priority key, and
    statements are admitted in key order while all their entities are below
    ``cap``. For a single entity this is a uniform sample of size ``cap``.
    Survivors keep their input order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    statements = list(statements)
    rng = random.Random(seed)
    keys = [rng.random() for _ in statements]
    counts: dict[str, int] = {}
    kept = []
    for idx in sorted(range(len(statements)), key=lambda i: (keys[i], i)):
        ents = set((statements[idx].e1, statements[idx].e2))
        if all(counts.get(e, 0) < cap for e in ents):
            for e in ents:
                counts[e] = counts.get(e, 0) + 1
            kept.append(idx)
    kept.sort()
    return [statements[i] for i in kept]


def read_documents(path: str | Path) -> list[Document]:
    docs = []
    for lineno, rec in io.read_jsonl(path, "mtb.documents"):
        try:
            docs.append(Document.from_json(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise io.FormatError(f"bad document record ({exc})", str(path), lineno) from None
    return docs


def write_documents(path: str | Path, docs: Iterable[Document]) -> int:
    return io.write_jsonl(path, "mtb.documents", (d.to_json() for d in docs))


def read_statements(path: str | Path) -> list[RelationStatement]:
    out = []
    for lineno, rec in io.read_jsonl(path, "mtb.statements"):
        try:
            out.append(RelationStatement.from_json(rec))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise io.FormatError(f"bad statement record ({exc})", str(path), lineno) from None
    return out


def write_statements(path: str | Path, statements: Iterable[RelationStatement]) -> int:
    return io.write_jsonl(path, "mtb.statements", (s.to_json() for s in statements))
