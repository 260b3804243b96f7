"""Small transformer relation encoder with the three input and output variants.

Input variants
    standard        token ids unchanged, every segment id 0
    positional_emb  segment id 1 over span 1, 2 over span 2
    entity_markers  [E1start]/[E1end] and [E2start]/[E2end] wrap the spans

Output variants
    cls             h_0
    mention_pool    per-span elementwise max, concatenated
    entity_start    hidden states at the two start markers, concatenated
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .tokens import E1_END_ID, E1_START_ID, E2_END_ID, E2_START_ID, PAD_ID

INPUT_VARIANTS = ("standard", "positional_emb", "entity_markers")
OUTPUT_VARIANTS = ("cls", "mention_pool", "entity_start")
POST_LAYERS = ("linear_dense", "layer_norm")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 128
    input_variant: str = "entity_markers"
    output_variant: str = "entity_start"
    post_layer: str = "layer_norm"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.input_variant not in INPUT_VARIANTS:
            raise ValueError(f"unknown input_variant {self.input_variant!r}")
        if self.output_variant not in OUTPUT_VARIANTS:
            raise ValueError(f"unknown output_variant {self.output_variant!r}")
        if self.post_layer not in POST_LAYERS:
            raise ValueError(f"unknown post_layer {self.post_layer!r}")
        if self.output_variant == "entity_start" and self.input_variant != "entity_markers":
            raise ValueError("entity_start output requires entity_markers input")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def rep_dim(self) -> int:
        return self.hidden if self.output_variant == "cls" else 2 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedInput:
    ids: list[int]
    segment_ids: list[int]
    span1: tuple[int, int]
    span2: tuple[int, int]
    marker1: int | None = None
    marker2: int | None = None
    maskable: list[bool] = field(default_factory=list)


def build_input(statement, variant: str, max_len: int | None = None) -> EncodedInput:
    """Encode a (possibly blanked) statement for one input variant.

    ``statement`` needs ``x``, ``s1`` and ``s2`` attributes.
    """
    x = list(statement.x)
    (i, j), (k, l) = statement.s1, statement.s2
    if not (0 < i < j <= k < l <= len(x) - 1):
        raise ValueError(f"spans overlap or fall outside the statement: s1={statement.s1} s2={statement.s2}")
    if variant == "standard":
        inp = EncodedInput(x, [0] * len(x), (i, j), (k, l))
    elif variant == "positional_emb":
        seg = [0] * len(x)
        seg[i:j] = [1] * (j - i)
        seg[k:l] = [2] * (l - k)
        inp = EncodedInput(x, seg, (i, j), (k, l))
    elif variant == "entity_markers":
        ids = x[:i] + [E1_START_ID] + x[i:j] + [E1_END_ID] + x[j:k] + [E2_START_ID] + x[k:l] + [E2_END_ID] + x[l:]
        inp = EncodedInput(ids, [0] * len(ids), (i + 1, j + 1), (k + 3, l + 3), i, k + 2)
    else:
        raise ValueError(f"unknown input variant {variant!r}")
    if max_len is not None and len(inp.ids) > max_len:
        raise ValueError("statement too long")
    return inp


class Block(nn.Module):
    """Pre-LayerNorm transformer block."""

    def __init__(self, hidden: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.ff1 = nn.Linear(hidden, ffn_mult * hidden)
        self.ff2 = nn.Linear(ffn_mult * hidden, hidden)

    def forward(self, h: torch.Tensor, key_pad: torch.Tensor) -> torch.Tensor:
        B, T, D = h.shape
        q, k, v = self.qkv(self.ln1(h)).split(D, dim=-1)
        q = q.view(B, T, self.heads, -1).transpose(1, 2)
        k = k.view(B, T, self.heads, -1).transpose(1, 2)
        v = v.view(B, T, self.heads, -1).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        att = att.masked_fill(key_pad[:, None, None, :], float("-inf"))
        att = torch.softmax(att, dim=-1)
        a = (att @ v).transpose(1, 2).reshape(B, T, D)
        h = h + self.proj(a)
        return h + self.ff2(F.gelu(self.ff1(self.ln2(h))))


@dataclass
class Batch:
    ids: torch.Tensor
    segments: torch.Tensor
    pad: torch.Tensor
    span1: torch.Tensor
    span2: torch.Tensor
    markers: torch.Tensor | None


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden
        self.tok = nn.Embedding(config.vocab_size, d)
        self.pos = nn.Embedding(config.max_len, d)
        self.seg = nn.Embedding(3, d)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.ffn_mult) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(d)
        if config.post_layer == "linear_dense":
            self.post = nn.Linear(config.rep_dim, config.rep_dim)
        else:
            self.post = nn.LayerNorm(config.rep_dim)
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.reset_parameters()
        self.to(DTYPES[config.dtype])

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.config.seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias") or name == "mlm_bias":
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0)
                elif name.startswith("post") and self.config.post_layer == "layer_norm":
                    # unit-scale dot products between representations at init
                    p.fill_(self.config.rep_dim**-0.5)
                elif name.startswith("post"):
                    p.copy_(torch.randn(p.shape, generator=g) * p.shape[0] ** -0.5)
                else:
                    p.copy_(0.02 * torch.randn(p.shape, generator=g))

    @property
    def dtype(self) -> torch.dtype:
        return self.tok.weight.dtype

    def collate(self, inputs: Sequence[EncodedInput]) -> Batch:
        T = max(len(x.ids) for x in inputs)
        if T > self.config.max_len:
            raise ValueError("statement too long")
        B = len(inputs)
        ids = torch.full((B, T), PAD_ID, dtype=torch.long)
        seg = torch.zeros((B, T), dtype=torch.long)
        for b, x in enumerate(inputs):
            ids[b, : len(x.ids)] = torch.tensor(x.ids, dtype=torch.long)
            seg[b, : len(x.ids)] = torch.tensor(x.segment_ids, dtype=torch.long)
        pad = torch.ones((B, T), dtype=torch.bool)
        for b, x in enumerate(inputs):
            pad[b, : len(x.ids)] = False
        span1 = torch.tensor([x.span1 for x in inputs], dtype=torch.long)
        span2 = torch.tensor([x.span2 for x in inputs], dtype=torch.long)
        markers = None
        if all(x.marker1 is not None and x.marker2 is not None for x in inputs):
            markers = torch.tensor([(x.marker1, x.marker2) for x in inputs], dtype=torch.long)
        return Batch(ids, seg, pad, span1, span2, markers)

    def embed(self, batch: Batch) -> torch.Tensor:
        T = batch.ids.shape[1]
        return self.tok(batch.ids) + self.pos.weight[:T][None] + self.seg(batch.segments)

    def hidden_states(self, batch: Batch) -> torch.Tensor:
        h = self.embed(batch)
        for block in self.blocks:
            h = block(h, batch.pad)
        h = self.ln_f(h)
        if not torch.isfinite(h).all():
            raise FloatingPointError("numeric overflow")
        return h

    def pool(self, H: torch.Tensor, batch: Batch) -> torch.Tensor:
        """Fixed-length representation before the post layer."""
        variant = self.config.output_variant
        if variant == "cls":
            return H[:, 0]
        if variant == "entity_start":
            if batch.markers is None:
                raise ValueError("entity_start output needs entity marker positions")
            rows = torch.arange(H.shape[0])
            return torch.cat([H[rows, batch.markers[:, 0]], H[rows, batch.markers[:, 1]]], dim=-1)
        pos = torch.arange(H.shape[1])[None]
        parts = []
        for span in (batch.span1, batch.span2):
            inside = (pos >= span[:, :1]) & (pos < span[:, 1:])
            parts.append(H.masked_fill(~inside[..., None], float("-inf")).amax(dim=1))
        return torch.cat(parts, dim=-1)

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.post(self.pool(self.hidden_states(batch), batch))

    def mlm_logits(self, H: torch.Tensor) -> torch.Tensor:
        return H @ self.tok.weight.T + self.mlm_bias

    def input_for(self, statement) -> EncodedInput:
        return build_input(statement, self.config.input_variant, self.config.max_len)

    def represent(self, inputs: Sequence[EncodedInput]) -> torch.Tensor:
        return self(self.collate(inputs))

    @torch.no_grad()
    def represent_statements(self, statements: Sequence, batch_size: int = 256) -> torch.Tensor:
        """Inference-mode representations, in input order."""
        was_training = self.training
        self.eval()
        out = []
        for s in range(0, len(statements), batch_size):
            chunk = [self.input_for(st) for st in statements[s : s + batch_size]]
            out.append(self.represent(chunk))
        self.train(was_training)
        if not out:
            return torch.zeros((0, self.config.rep_dim), dtype=self.dtype)
        return torch.cat(out)


def encode(model: EncoderModel, inp: EncodedInput) -> torch.Tensor:
    """Final hidden states ``H`` of shape (len(ids), hidden) for one input."""
    return model.hidden_states(model.collate([inp]))[0]


def relation_rep(model: EncoderModel, inp: EncodedInput, H: torch.Tensor) -> torch.Tensor:
    """Apply the output variant and post layer to the hidden states of one input."""
    batch = model.collate([inp])
    return model.post(model.pool(H[None], batch))[0]


def maxpool(H: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    return H[span[0] : span[1]].amax(dim=0)
