"""Training losses.

All losses are torch scalars; gradients come from autograd and are checked
against central finite differences in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoder import EncodedInput, EncoderModel
from .tokens import BLANK_ID, CLS_ID, MARKER_IDS, MASK_ID, PAD_ID, SEP_ID, RESERVED

LOGIT_CLAMP = 30.0
UNMASKABLE = frozenset({CLS_ID, SEP_ID, PAD_ID, BLANK_ID, MASK_ID}) | MARKER_IDS


def mtb_probability(h, h2) -> float | torch.Tensor:
    """p(l=1 | r, r') = sigmoid(h . h'), with the dot product clamped to +-30."""
    if isinstance(h, torch.Tensor):
        z = (h * h2).sum(-1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        return torch.sigmoid(z)
    z = float(np.clip(np.dot(h, h2), -LOGIT_CLAMP, LOGIT_CLAMP))
    return 1.0 / (1.0 + math.exp(-z))


def mtb_loss(h: torch.Tensor, h2: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(h . h') against same-pair labels.

    Written in log-sigmoid form, which equals the clamped probability form
    for |h . h'| <= 30 and keeps a useful gradient beyond it.
    """
    z = (h * h2).sum(-1)
    return F.binary_cross_entropy_with_logits(z, labels.to(z.dtype))


@dataclass
class MlmBatch:
    inputs: list[EncodedInput]
    targets: list[list[tuple[int, int]]]


def mask_tokens(
    inp: EncodedInput,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
) -> tuple[EncodedInput, list[tuple[int, int]]]:
    """BERT-style corruption: 80% [MASK], 10% random token, 10% unchanged.

    Reserved symbols are never targets. If nothing is selected one maskable
    position is forced.
    """
    maskable = [p for p, t in enumerate(inp.ids) if t not in UNMASKABLE]
    if not maskable:
        raise ValueError("input has no maskable token")
    chosen = [p for p in maskable if rng.random() < mask_prob]
    if not chosen:
        chosen = [maskable[int(rng.integers(len(maskable)))]]
    ids = list(inp.ids)
    targets = []
    for p in chosen:
        targets.append((p, ids[p]))
        r = rng.random()
        if r < 0.8:
            ids[p] = MASK_ID
        elif r < 0.9:
            ids[p] = int(rng.integers(len(RESERVED), vocab_size))
    return replace(inp, ids=ids), targets


def make_mlm_batch(inputs: Sequence[EncodedInput], rng, vocab_size: int, mask_prob: float = 0.15) -> MlmBatch:
    masked, targets = [], []
    for inp in inputs:
        m, t = mask_tokens(inp, rng, vocab_size, mask_prob)
        masked.append(m)
        targets.append(t)
    return MlmBatch(masked, targets)


def mlm_loss_from_logits(logits: torch.Tensor, targets: Sequence[Sequence[tuple[int, int]]]) -> torch.Tensor:
    rows, cols, gold = [], [], []
    for b, tgt in enumerate(targets):
        for p, t in tgt:
            rows.append(b)
            cols.append(p)
            gold.append(t)
    sel = logits[torch.tensor(rows), torch.tensor(cols)]
    return F.cross_entropy(sel, torch.tensor(gold))


def mlm_loss(model: EncoderModel, batch: MlmBatch) -> torch.Tensor:
    """Mean cross-entropy at target positions; output layer tied to token embeddings."""
    H = model.hidden_states(model.collate(batch.inputs))
    return mlm_loss_from_logits(model.mlm_logits(H), batch.targets)


class ClassifierHead(nn.Module):
    """Relation-type classifier ``softmax(h_r W^T + b)``."""

    def __init__(self, num_classes: int, rep_dim: int, nil_index: int | None = None, labels: Sequence[str] | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if num_classes < 2:
            raise ValueError("classifier needs at least 2 classes")
        self.num_classes = num_classes
        self.nil_index = nil_index
        self.labels = list(labels) if labels is not None else [str(i) for i in range(num_classes)]
        g = torch.Generator().manual_seed(seed)
        self.W = nn.Parameter((0.02 * torch.randn(num_classes, rep_dim, generator=g)).to(dtype))
        self.bias = nn.Parameter(torch.zeros(num_classes, dtype=dtype))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.W.T + self.bias


def supervised_loss(head: ClassifierHead, h: torch.Tensor, true_type) -> torch.Tensor:
    t = torch.as_tensor(true_type, dtype=torch.long)
    if t.numel() and (t.min() < 0 or t.max() >= head.num_classes):
        raise ValueError(f"relation type out of range 0..{head.num_classes - 1}")
    logits = head(h)
    if logits.dim() == 1:
        return F.cross_entropy(logits[None], t.reshape(1))
    return F.cross_entropy(logits, t)


def fewshot_scores(query, candidates):
    """Dot-product scores of one query against each candidate representation."""
    if len(candidates) < 2:
        raise ValueError("need at least 2 candidates")
    if isinstance(query, torch.Tensor):
        return candidates @ query
    return np.asarray(candidates) @ np.asarray(query)


def fewshot_predict(scores) -> int:
    """Argmax; the lowest index wins ties."""
    return int(np.argmax(np.asarray(scores.detach() if isinstance(scores, torch.Tensor) else scores)))


def fewshot_loss(scores: torch.Tensor, true_index) -> torch.Tensor:
    """Cross-entropy of the softmax over candidate scores. ``scores`` may be batched (E, C)."""
    if scores.dim() == 1:
        scores = scores[None]
    t = torch.as_tensor(true_index, dtype=torch.long).reshape(-1)
    return F.cross_entropy(scores, t)
