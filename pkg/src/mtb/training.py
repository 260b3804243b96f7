"""Optimizers, training loops and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from . import io
from .encoder import DTYPES, EncoderConfig, EncoderModel
from .evaluation import LabeledStatement, build_episodes
from .objectives import (
    ClassifierHead,
    fewshot_loss,
    MlmBatch,
    make_mlm_batch,
    mlm_loss_from_logits,
    mtb_loss,
    supervised_loss,
)
from .pairgen import StatementPair
from .tokens import Vocabulary

log = logging.getLogger(__name__)

MODES = ("mtb_pretrain", "supervised_finetune", "fewshot_finetune")
CHECKPOINT_FORMAT = "mtb.checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "mtb_pretrain"
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    steps: int = 2000
    epochs: int | None = None
    seed: int = 0
    lambda_mlm: float = 1.0
    mlm_schedule: str = "summed"
    mask_prob: float = 0.15
    warmup_steps: int = 0
    micro_batches: int = 1
    checkpoint_every: int = 0
    log_every: int = 50
    n_way: int = 5
    k_shot: int = 1
    head_lr: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mlm_schedule not in ("summed", "alternating"):
            raise ValueError("mlm_schedule must be 'summed' or 'alternating'")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"encoder"}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        raw = {k: v for k, v in raw.items() if k in known}
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)


# -------------------------------------------------------------- optimizers


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: dict, lr: float) -> dict:
    """p <- p - lr * g, in place."""
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(lr * g)
    state["t"] = state.get("t", 0) + 1
    return state


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Adam with bias-corrected moments, in place. ``state`` holds ``t``, ``m``, ``v``."""
    t = state.get("t", 0) + 1
    if "m" not in state:
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    state["t"] = t
    return state


# ------------------------------------------------------------------ losses


def _pair_inputs(model: EncoderModel, pairs: Sequence[StatementPair]):
    a = [model.input_for(p.a) for p in pairs]
    b = [model.input_for(p.b) for p in pairs]
    return a, b


def mtb_batch_loss(model, pairs, rng, cfg: TrainConfig, step: int, total: int | None = None, mlm: MlmBatch | None = None, mlm_total: int | None = None):
    """Weighted MTB (+ MLM) loss of one micro-batch; weights make micro-batches sum to the batch mean.

    ``total`` is the number of pairs in the whole batch and ``mlm_total`` the
    number of MLM targets in it. ``mlm`` is the masked copy of this
    micro-batch's first statements; it is drawn from ``rng`` when omitted.
    Returns ``(loss, parts)`` where parts are unweighted per-term values.
    """
    total = total or len(pairs)
    do_mtb, do_mlm = _active_terms(cfg, step)
    loss = torch.zeros((), dtype=model.dtype)
    parts = {}
    if do_mtb:
        a, b = _pair_inputs(model, pairs)
        reps = model.represent(a + b)
        labels = torch.tensor([p.label for p in pairs])
        l_mtb = mtb_loss(reps[: len(pairs)], reps[len(pairs) :], labels)
        loss = loss + l_mtb * (len(pairs) / total)
        parts["mtb_loss"] = l_mtb.item()
    if do_mlm:
        if mlm is None:
            mlm = _mask_pairs(model, pairs, rng, cfg)
        n_targets = sum(len(t) for t in mlm.targets)
        H = model.hidden_states(model.collate(mlm.inputs))
        l_mlm = mlm_loss_from_logits(model.mlm_logits(H), mlm.targets)
        loss = loss + cfg.lambda_mlm * l_mlm * (n_targets / (mlm_total or n_targets))
        parts["mlm_loss"] = l_mlm.item()
    return loss, parts


def _active_terms(cfg: TrainConfig, step: int) -> tuple[bool, bool]:
    do_mtb = cfg.mlm_schedule == "summed" or step % 2 == 0
    do_mlm = cfg.lambda_mlm > 0 and (cfg.mlm_schedule == "summed" or step % 2 == 1)
    return do_mtb, do_mlm


def _mask_pairs(model, pairs, rng, cfg: TrainConfig) -> MlmBatch:
    return make_mlm_batch([model.input_for(p.a) for p in pairs], rng, model.config.vocab_size, cfg.mask_prob)


def supervised_batch_loss(model, head, records: Sequence[LabeledStatement], label_ids: dict[str, int], total: int | None = None):
    total = total or len(records)
    reps = model.represent([model.input_for(r) for r in records])
    gold = [label_ids[r.relation] for r in records]
    loss = supervised_loss(head, reps, gold)
    return loss * (len(records) / total), {"sup_loss": loss.item()}


def fewshot_batch_loss(model, episodes, records: Sequence[LabeledStatement], total: int | None = None):
    total = total or len(episodes)
    used = sorted({i for ep in episodes for i in [ep.query, *(j for s in ep.support for j in s)]})
    pos = {i: n for n, i in enumerate(used)}
    reps = model.represent([model.input_for(records[i]) for i in used])
    scores = []
    for ep in episodes:
        q = reps[pos[ep.query]]
        cls = [(reps[[pos[j] for j in sup]] @ q).max() for sup in ep.support]
        scores.append(torch.stack(cls))
    loss = fewshot_loss(torch.stack(scores), [ep.true_class for ep in episodes])
    return loss * (len(episodes) / total), {"fewshot_loss": loss.item()}


# ----------------------------------------------------------------- driver


@dataclass
class TrainResult:
    model: EncoderModel
    head: ClassifierHead | None
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0


def _check_data(mode: str, data) -> None:
    if not data:
        raise TrainingError("training data is empty")
    expected = StatementPair if mode == "mtb_pretrain" else LabeledStatement
    if not isinstance(data[0], expected):
        raise TrainingError(f"mode {mode!r} expects {expected.__name__} records, got {type(data[0]).__name__}")


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def train(
    model: EncoderModel,
    data: Sequence,
    config: TrainConfig,
    head: ClassifierHead | None = None,
    label_ids: dict[str, int] | None = None,
    eval_fn: Callable[[EncoderModel, ClassifierHead | None], dict] | None = None,
    eval_every: int = 0,
    on_checkpoint: Callable[[int, EncoderModel, ClassifierHead | None], None] | None = None,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Optimize the loss selected by ``config.mode`` over ``data``.

    mtb_pretrain           data are StatementPairs; loss is MTB + lambda * MLM
    supervised_finetune    data are LabeledStatements; needs ``head`` and ``label_ids``
    fewshot_finetune       data are LabeledStatements; episodes are resampled each step
    """
    cfg = config
    _check_data(cfg.mode, data)
    if cfg.mode == "supervised_finetune":
        if head is None or label_ids is None:
            raise TrainingError("supervised_finetune needs a classifier head and a label map")
        missing = {r.relation for r in data} - set(label_ids)
        if missing:
            raise TrainingError(f"labels missing from the label map: {sorted(missing)}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    modules = [model] + ([head] if head is not None and cfg.mode == "supervised_finetune" else [])
    params = [p for m in modules for p in m.parameters()]
    state: dict = {}
    head_lr = cfg.head_lr if cfg.head_lr is not None else cfg.lr
    n_model = len(list(model.parameters()))
    steps = cfg.steps
    unit = cfg.batch_size
    if cfg.epochs is not None and cfg.mode != "fewshot_finetune":
        steps = cfg.epochs * math.ceil(len(data) / unit)
    order = rng.permutation(len(data))
    cursor = 0
    metrics: list[dict] = []
    model.train()
    for step in range(steps):
        if cfg.mode == "fewshot_finetune":
            batch = build_episodes(data, cfg.n_way, cfg.k_shot, unit, int(rng.integers(2**31)))
        else:
            if cursor + unit > len(order):
                order = np.concatenate([order[cursor:], rng.permutation(len(data))])
                cursor = 0
            batch = [data[i] for i in order[cursor : cursor + unit]]
            cursor += unit
        try:
            loss_value, parts = _accumulate(model, head, batch, data, cfg, rng, step, params, label_ids)
        except FloatingPointError as exc:
            raise TrainingError(f"{exc} at step {step}") from None
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite loss {loss_value} at step {step}")
        grads = [p.grad for p in params]
        lr = _lr_at(cfg, step)
        if cfg.optimizer == "adam":
            lrs = [lr] * n_model + [head_lr * lr / cfg.lr if cfg.lr else 0.0] * (len(params) - n_model)
            _adam_groups(params, grads, state, lrs, cfg)
        else:
            sgd_step(params, grads, state, lr)
        for p in params:
            p.grad = None
        if (step + 1) % cfg.log_every == 0 or step == 0 or step + 1 == steps:
            rec = {"step": step + 1, "loss": loss_value, "lr": lr, **parts}
            if eval_fn is not None and eval_every and ((step + 1) % eval_every == 0 or step + 1 == steps):
                model.eval()
                rec.update(eval_fn(model, head))
                model.train()
            metrics.append(rec)
            log.info("step %d loss %.4f", step + 1, loss_value)
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1, model, head)
    model.eval()
    if metrics_path is not None:
        io.write_jsonl(metrics_path, "mtb.metrics", metrics)
    return TrainResult(model, head, metrics, steps)


def _adam_groups(params, grads, state, lrs, cfg):
    # One Adam state; per-parameter learning rates applied via grouping by lr.
    if "m" not in state:
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    t = state.get("t", 0)
    for lr in sorted(set(lrs)):
        idx = [i for i, x in enumerate(lrs) if x == lr]
        sub = {"t": t, "m": [state["m"][i] for i in idx], "v": [state["v"][i] for i in idx]}
        adam_step([params[i] for i in idx], [grads[i] for i in idx], sub, lr, cfg.beta1, cfg.beta2, cfg.eps)
    state["t"] = t + 1


def batch_gradients(model, head, batch, data, cfg: TrainConfig, rng, step: int = 0, label_ids=None):
    """Loss and gradients of one batch split into ``cfg.micro_batches`` parts."""
    modules = [model] + ([head] if head is not None and cfg.mode == "supervised_finetune" else [])
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.grad = None
    loss, _ = _accumulate(model, head, batch, data, cfg, rng, step, params, label_ids)
    return loss, [None if p.grad is None else p.grad.clone() for p in params]


def _accumulate(model, head, batch, data, cfg, rng, step, params, label_ids):
    k = max(1, min(cfg.micro_batches, len(batch)))
    bounds = np.linspace(0, len(batch), k + 1).astype(int)
    total_loss = 0.0
    parts_acc: dict[str, float] = {}
    mlm = None
    if cfg.mode == "mtb_pretrain" and _active_terms(cfg, step)[1]:
        # mask the whole batch up front so the split does not change the draws
        mlm = _mask_pairs(model, batch, rng, cfg)
        mlm_total = sum(len(t) for t in mlm.targets)
    for a, b in zip(bounds[:-1], bounds[1:]):
        micro = batch[a:b]
        weights = {}
        if cfg.mode == "mtb_pretrain":
            sub = None if mlm is None else MlmBatch(mlm.inputs[a:b], mlm.targets[a:b])
            loss, parts = mtb_batch_loss(model, micro, rng, cfg, step, len(batch), sub, mlm_total if sub else None)
            if sub is not None:
                weights["mlm_loss"] = sum(len(t) for t in sub.targets) / mlm_total
        elif cfg.mode == "supervised_finetune":
            loss, parts = supervised_batch_loss(model, head, micro, label_ids, len(batch))
        else:
            loss, parts = fewshot_batch_loss(model, micro, data, len(batch))
        if loss.requires_grad:
            loss.backward()
        total_loss += loss.item()
        for key, v in parts.items():
            parts_acc[key] = parts_acc.get(key, 0.0) + v * weights.get(key, (b - a) / len(batch))
    return total_loss, parts_acc


# ------------------------------------------------------------- checkpoints


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(path: str | Path, model: EncoderModel, vocab: Vocabulary, head: ClassifierHead | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``tensors.bin`` (+ ``vocab.txt``) into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    named = [("encoder." + n, p) for n, p in model.state_dict().items()]
    if head is not None:
        named += [("head." + n, p) for n, p in head.state_dict().items()]
    for name, t in named:
        b = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    data = b"".join(blobs)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": model.config.to_dict(),
        "vocab_sha256": vocab.digest(),
        "tensors_sha256": hashlib.sha256(data).hexdigest(),
        "tensors": entries,
        "head": None
        if head is None
        else {"num_classes": head.num_classes, "nil_index": head.nil_index, "labels": head.labels},
        "extra": extra or {},
    }
    (path / "tensors.bin").write_bytes(data)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    vocab.save(path / "vocab.txt")
    return path


def load_checkpoint(path: str | Path, vocab: Vocabulary | None = None):
    """Return ``(model, vocab, head, manifest)``; rejects unknown versions and vocab mismatches."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise io.FormatError("not a checkpoint directory (manifest.json missing)", str(path)) from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise io.FormatError(f"unsupported checkpoint {manifest.get('format')!r} version {manifest.get('version')!r}", str(path))
    ck_vocab = Vocabulary.load(path / "vocab.txt")
    if ck_vocab.digest() != manifest["vocab_sha256"]:
        raise io.FormatError("vocab.txt does not match the checkpoint's vocabulary hash", str(path))
    if vocab is not None and vocab.digest() != manifest["vocab_sha256"]:
        raise io.FormatError("checkpoint was trained with a different vocabulary", str(path))
    data = (path / "tensors.bin").read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["tensors_sha256"]:
        raise io.FormatError("tensors.bin is corrupt (hash mismatch)", str(path))
    config = EncoderConfig(**manifest["encoder_config"])
    model = EncoderModel(config)
    head = None
    if manifest["head"] is not None:
        h = manifest["head"]
        head = ClassifierHead(h["num_classes"], config.rep_dim, h["nil_index"], h["labels"], dtype=DTYPES[config.dtype])
    enc_state, head_state = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]).newbyteorder("<"), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        t = torch.from_numpy(arr.astype(np.dtype(e["dtype"])).reshape(e["shape"]).copy())
        if e["name"].startswith("encoder."):
            enc_state[e["name"][len("encoder.") :]] = t
        else:
            head_state[e["name"][len("head.") :]] = t
    model.load_state_dict(enc_state)
    model.eval()
    if head is not None:
        head.load_state_dict(head_state)
    return model, ck_vocab, head, manifest
