"""Synthetic end-to-end experiments.

Each ``run_*`` function builds its own templated world from a seed, trains
what it needs and returns a flat dict of results. The scripts in
``scripts/`` and the acceptance tests call these directly.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import corpus, evaluation, pairgen, synth, training
from .encoder import EncoderConfig, EncoderModel
from .objectives import ClassifierHead
from .tokens import build_vocab

log = logging.getLogger(__name__)


@dataclass
class WorldConfig:
    relations: int = 12
    templates: int = 4
    entities: int = 200
    docs: int = 4000
    eval_docs: int = 600
    sentences_per_doc: int = 1
    window: int = 40


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    max_len: int = 64


@dataclass
class FewshotConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    lambda_mlm: float = 0.0
    n_way: int = 5
    k_shot: int = 1
    episodes: int = 10_000
    heldout: int = 4


@dataclass
class VariantConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(docs=2000, eval_docs=400, sentences_per_doc=2, window=12))
    model: ModelConfig = field(default_factory=ModelConfig)
    variants: tuple = (("entity_markers", "entity_start"), ("standard", "cls"))
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class LowResourceConfig:
    pretrain: FewshotConfig = field(default_factory=FewshotConfig)
    labeled_docs: int = 500
    fractions: tuple = (0.01, 0.1)
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    head_lr: float = 1e-2


@dataclass
class ChanceConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(templates=1000, docs=0, eval_docs=12_000))
    model: ModelConfig = field(default_factory=ModelConfig)
    n_way: int = 5
    episodes: int = 10_000
    level: float = 0.99


@dataclass
class WorldData:
    world: synth.World
    vocab: object
    statements: list  # pretraining statements (unlabeled use)
    eval_records: list  # labeled eval statements over single-instance facts


def build_world(cfg: WorldConfig, seed: int, eval_repeats=(1, 1)) -> WorldData:
    """Pretraining documents plus a fresh evaluation sample from the same world.

    Evaluation facts occur once each, so an episode cannot be solved by
    matching the entity pair of the query to a support statement.
    """
    world = synth.make_world(cfg.relations, cfg.templates, cfg.entities, seed)
    docs, _ = synth.sample_documents(world, cfg.docs, seed, cfg.sentences_per_doc) if cfg.docs else ([], [])
    edocs, egold = synth.sample_documents(
        world, cfg.eval_docs, seed + 1000, cfg.sentences_per_doc, repeats=eval_repeats, doc_prefix="e"
    )
    vocab = build_vocab(t for d in docs + edocs for t in d.tokens)
    statements = corpus.extract_corpus(docs, vocab, cfg.window)
    eval_records = synth.label_statements(corpus.extract_corpus(edocs, vocab, cfg.window), egold)
    return WorldData(world, vocab, statements, eval_records)


def make_encoder(vocab_size: int, cfg: ModelConfig, seed: int, **kw) -> EncoderModel:
    return EncoderModel(EncoderConfig(vocab_size=vocab_size, seed=seed, **asdict(cfg), **kw))


def pretrain_mtb(data: WorldData, cfg: FewshotConfig, seed: int) -> EncoderModel:
    """MTB pretraining from scratch on unlabeled statements."""
    pcfg = pairgen.PairGenConfig(seed=seed, max_pairs=cfg.steps * cfg.batch_size)
    pairs = list(pairgen.generate_pairs(data.statements, pcfg))
    model = make_encoder(len(data.vocab), cfg.model, seed)
    tcfg = training.TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, lambda_mlm=cfg.lambda_mlm, seed=seed, log_every=500)
    training.train(model, pairs, tcfg)
    return model


def fewshot_accuracy(model, records, n_way: int, k_shot: int, episodes: int, seed: int, types=None) -> float:
    eps = evaluation.build_episodes(records, n_way, k_shot, episodes, seed, types=types, distinct_key="template")
    return evaluation.evaluate_fewshot(model, eps, records).metrics["accuracy"]


def run_mtb_fewshot(cfg: FewshotConfig, seed: int, data: WorldData | None = None) -> dict:
    """Label-free MTB pretraining, then exemplar matching on fresh statements.

    ``accuracy`` is N-way K-shot over every relation type; ``heldout_accuracy``
    restricts episodes to the held-out types (one fewer way when there are
    only as many held-out types as ways).
    """
    t0 = time.perf_counter()
    data = data or build_world(cfg.world, seed)
    records = [r for r in data.eval_records if r.relation != synth.NIL]
    train_types, heldout = synth.split_types(data.world.relations, cfg.heldout)
    random_model = make_encoder(len(data.vocab), cfg.model, seed)
    random_acc = fewshot_accuracy(random_model, records, cfg.n_way, cfg.k_shot, cfg.episodes, seed)
    model = pretrain_mtb(data, cfg, seed)
    acc = fewshot_accuracy(model, records, cfg.n_way, cfg.k_shot, cfg.episodes, seed)
    ways = min(cfg.n_way, len(heldout))
    held = fewshot_accuracy(model, records, ways, cfg.k_shot, cfg.episodes, seed, types=heldout)
    return {
        "seed": seed,
        "accuracy": acc,
        "heldout_accuracy": held,
        "heldout_ways": ways,
        "random_accuracy": random_acc,
        "statements": len(data.statements),
        "seconds": time.perf_counter() - t0,
        "model": model,
        "data": data,
    }


def chance_micro_f1(gold, num_classes: int, nil_index: int | None) -> float:
    """Expected micro-F1 (nil excluded) of guessing uniformly over all classes."""
    gold = np.asarray(gold)
    n = len(gold)
    non_nil = int((gold != nil_index).sum()) if nil_index is not None else n
    predicted = n * (num_classes - 1) / num_classes if nil_index is not None else n
    tp = non_nil / num_classes
    p, r = tp / predicted, tp / non_nil
    return 2 * p * r / (p + r)


def run_variant_comparison(cfg: VariantConfig, seed: int) -> dict:
    """Supervised relation classification with each input/output variant."""
    world = synth.make_world(cfg.world.relations, cfg.world.templates, cfg.world.entities, seed)
    docs, gold = synth.sample_documents(world, cfg.world.docs, seed, cfg.world.sentences_per_doc)
    edocs, egold = synth.sample_documents(world, cfg.world.eval_docs, seed + 1000, cfg.world.sentences_per_doc, doc_prefix="e")
    vocab = build_vocab(t for d in docs + edocs for t in d.tokens)
    train_set = synth.label_statements(corpus.extract_corpus(docs, vocab, cfg.world.window), gold)
    eval_set = synth.label_statements(corpus.extract_corpus(edocs, vocab, cfg.world.window), egold)
    label_ids = {n: i for i, n in enumerate([synth.NIL, *world.relations])}
    out = {"seed": seed, "train": len(train_set), "eval": len(eval_set)}
    out["chance_f1"] = chance_micro_f1([label_ids[r.relation] for r in eval_set], len(label_ids), 0)
    for iv, ov in cfg.variants:
        model = make_encoder(len(vocab), cfg.model, seed, input_variant=iv, output_variant=ov)
        head = ClassifierHead(len(label_ids), model.config.rep_dim, 0, list(label_ids), seed=seed)
        tcfg = training.TrainConfig(mode="supervised_finetune", steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed, log_every=10**9)
        training.train(model, train_set, tcfg, head=head, label_ids=label_ids)
        out[f"{iv}+{ov}"] = evaluation.evaluate_supervised(model, head, eval_set, label_ids).metrics["micro_f1"]
    return out


def finetune_classifier(model, records, label_ids, cfg: LowResourceConfig, seed: int):
    head = ClassifierHead(len(label_ids), model.config.rep_dim, None, list(label_ids), seed=seed)
    tcfg = training.TrainConfig(
        mode="supervised_finetune", steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, head_lr=cfg.head_lr, seed=seed, log_every=10**9
    )
    training.train(model, records, tcfg, head=head, label_ids=label_ids)
    return head


def run_low_resource(cfg: LowResourceConfig, seed: int, pretrained: dict | None = None) -> dict:
    """Fine-tune an MTB-pretrained and a freshly initialised encoder on small labeled subsets.

    The labeled set is a separate document sample from the pretraining
    world. ``pretrained`` may pass in the result of ``run_mtb_fewshot`` for
    the same seed to reuse its encoder.
    """
    if pretrained is None:
        pretrained = run_mtb_fewshot(replace(cfg.pretrain, episodes=100), seed)
    data: WorldData = pretrained["data"]
    ldocs, lgold = synth.sample_documents(data.world, cfg.labeled_docs, seed + 2000, cfg.pretrain.world.sentences_per_doc, doc_prefix="l")
    labeled = synth.label_statements(corpus.extract_corpus(ldocs, data.vocab, cfg.pretrain.world.window), lgold)
    labeled = [r for r in labeled if r.relation != synth.NIL]
    eval_set = [r for r in data.eval_records if r.relation != synth.NIL]
    label_ids = {n: i for i, n in enumerate(data.world.relations)}
    state = {k: v.clone() for k, v in pretrained["model"].state_dict().items()}
    out = {"seed": seed, "labeled": len(labeled)}
    for frac in cfg.fractions:
        subset = evaluation.subsample(labeled, "fraction", frac, seed)
        for name in ("pretrained", "scratch"):
            model = make_encoder(len(data.vocab), cfg.pretrain.model, seed)
            if name == "pretrained":
                model.load_state_dict(state)
            head = finetune_classifier(model, subset, label_ids, cfg, seed)
            out[f"{name}@{frac}"] = evaluation.evaluate_supervised(model, head, eval_set, label_ids).metrics["accuracy"]
        out[f"n@{frac}"] = len(subset)
    return out


def run_chance_check(cfg: ChanceConfig, seed: int) -> dict:
    """Untrained encoder on episodes where almost every statement has its own template."""
    data = build_world(cfg.world, seed)
    records = [r for r in data.eval_records if r.relation != synth.NIL]
    model = make_encoder(len(data.vocab), cfg.model, seed)
    acc = fewshot_accuracy(model, records, cfg.n_way, 1, cfg.episodes, seed)
    lo, hi = evaluation.chance_interval(cfg.episodes, cfg.n_way, cfg.level)
    return {"seed": seed, "accuracy": acc, "low": lo, "high": hi, "statements": len(records)}

