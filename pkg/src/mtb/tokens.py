"""Vocabulary, reserved symbols and the toy whitespace/punctuation tokenizer."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

CLS = "[CLS]"
SEP = "[SEP]"
PAD = "[PAD]"
UNK = "[UNK]"
MASK = "[MASK]"
BLANK = "[BLANK]"
E1_START = "[E1start]"
E1_END = "[E1end]"
E2_START = "[E2start]"
E2_END = "[E2end]"

RESERVED = (CLS, SEP, PAD, UNK, MASK, BLANK, E1_START, E1_END, E2_START, E2_END)
CLS_ID, SEP_ID, PAD_ID, UNK_ID, MASK_ID, BLANK_ID, E1_START_ID, E1_END_ID, E2_START_ID, E2_END_ID = range(10)
MARKER_IDS = frozenset({E1_START_ID, E1_END_ID, E2_START_ID, E2_END_ID})

_PUNCT = re.compile(r"([.,;:\"'()])")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and peel off ``. , ; : " ' ( )``."""
    out = []
    for chunk in text.split():
        out.extend(p for p in _PUNCT.split(chunk.lower()) if p)
    return out


class Vocabulary:
    """Dense token <-> id map. Ids 0..9 are always the reserved symbols."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.token_of: list[str] = list(tokens)
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(self.token_of)}

    reserved = RESERVED

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_of == other.token_of

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of[i] for i in ids]

    def digest(self) -> str:
        """sha256 of the serialized form; stored in checkpoints."""
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.token_of)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocab(corpus_token_stream: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Reserved tokens, then every token seen at least ``min_count`` times.

    Non-reserved tokens are ordered by descending count, ties broken
    lexicographically, so the result does not depend on stream order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(corpus_token_stream)
    if not counts:
        raise ValueError("empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(RESERVED) + kept)
