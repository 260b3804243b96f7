"""``mtb`` command line: synth, extract, pairgen, train, eval, sweep, plot.

Relative paths are resolved against ``$MTB_DATA_DIR`` when it is set.
On failure a single JSON error record is written to stderr and the exit
code is nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus, evaluation, io, pairgen, synth, training
from .encoder import EncoderConfig, EncoderModel
from .objectives import ClassifierHead
from .tokens import Vocabulary, build_vocab

log = logging.getLogger("mtb")

EXIT_ERROR = 1


class CliError(Exception):
    pass


def data_path(p: str | os.PathLike | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    base = os.environ.get("MTB_DATA_DIR")
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _csv(s: str | None) -> list[str] | None:
    return None if s is None else [x for x in s.split(",") if x]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> dict:
    out = data_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world, docs, gold = synth.synth_corpus(
        args.relations, args.templates, args.entities, args.docs, args.seed, args.sentences_per_doc
    )
    eval_docs, eval_gold = [], []
    if args.eval_docs:
        eval_docs, eval_gold = synth.sample_documents(
            world, args.eval_docs, args.seed + 1000, args.sentences_per_doc, doc_prefix="e"
        )
    vocab = build_vocab(t for d in docs + eval_docs for t in d.tokens)
    vocab.save(out / "vocab.txt")
    corpus.write_documents(out / "documents.jsonl", docs)
    io.write_jsonl(out / "gold.jsonl", "mtb.gold", gold)
    labeled = synth.label_statements(corpus.extract_corpus(docs, vocab, args.window), gold)
    evaluation.write_labeled(out / "labeled.jsonl", labeled, vocab)
    evaluation.write_relation_map(out / "relations.json", [synth.NIL, *world.relations])
    summary = {"documents": len(docs), "labeled": len(labeled), "vocab": len(vocab)}
    if eval_docs:
        corpus.write_documents(out / "eval_documents.jsonl", eval_docs)
        io.write_jsonl(out / "eval_gold.jsonl", "mtb.gold", eval_gold)
        eval_labeled = synth.label_statements(corpus.extract_corpus(eval_docs, vocab, args.window), eval_gold)
        evaluation.write_labeled(out / "eval_labeled.jsonl", eval_labeled, vocab)
        summary["eval_labeled"] = len(eval_labeled)
    return summary


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> dict:
    docs = corpus.read_documents(data_path(args.input))
    vocab_path = data_path(args.vocab)
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        vocab = build_vocab((t for d in docs for t in d.tokens), args.min_count)
        vocab_path.parent.mkdir(parents=True, exist_ok=True)
        vocab.save(vocab_path)
    statements = corpus.extract_corpus(docs, vocab, args.window, args.workers)
    if args.cap:
        statements = corpus.cap_by_entity(statements, args.cap, args.seed)
    n = corpus.write_statements(data_path(args.out), statements)
    return {"statements": n}


# ---------------------------------------------------------------- pairgen


def cmd_pairgen(args) -> dict:
    cfg = pairgen.PairGenConfig(
        alpha=args.alpha,
        pos_fraction=args.pos_fraction,
        hard_fraction=args.hard_fraction,
        seed=args.seed,
        max_pairs=args.max_pairs,
        exclude_same_doc=args.exclude_same_doc,
    )
    out = data_path(args.out)
    if cfg.max_pairs == 0:
        return {"pairs": pairgen.write_pairs(out, [])}
    statements = corpus.read_statements(data_path(args.input))
    return {"pairs": pairgen.write_pairs(out, pairgen.generate_pairs(statements, cfg))}


# ------------------------------------------------------------------ train


def _load_labeled(paths, vocab, types=None, exclude=()) -> list[evaluation.LabeledStatement]:
    records = [r for p in paths for r in evaluation.read_labeled(data_path(p), vocab)]
    if types is not None:
        records = [r for r in records if r.relation in set(types)]
    return [r for r in records if r.relation not in set(exclude)]


def _encoder_config(raw: dict, vocab: Vocabulary, seed: int) -> EncoderConfig:
    raw = dict(raw)
    raw.setdefault("seed", seed)
    raw["vocab_size"] = len(vocab)
    return EncoderConfig(**raw)


def _config_file(path) -> dict:
    import yaml

    if path is None:
        return {}
    return yaml.safe_load(data_path(path).read_text(encoding="utf-8")) or {}


def cmd_train(args) -> dict:
    overrides = {"mode": args.mode, "seed": args.seed, "steps": args.steps, "lr": args.lr}
    if args.config:
        cfg = training.TrainConfig.from_file(data_path(args.config), **overrides)
    else:
        cfg = training.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    raw = _config_file(args.config)
    head = None
    if args.init:
        model, vocab, head, _ = training.load_checkpoint(data_path(args.init))
        if args.vocab and Vocabulary.load(data_path(args.vocab)) != vocab:
            raise CliError("--vocab differs from the vocabulary of --init")
    else:
        if not args.vocab:
            raise CliError("--vocab is required without --init")
        vocab = Vocabulary.load(data_path(args.vocab))
        model = EncoderModel(_encoder_config(raw.get("encoder", {}), vocab, cfg.seed))
    label_ids = None
    if cfg.mode == "mtb_pretrain":
        data = [p for path in args.data for p in pairgen.read_pairs(data_path(path))]
    else:
        data = _load_labeled(args.data, vocab, _csv(args.types), _csv(args.exclude) or ())
    if cfg.mode == "supervised_finetune":
        if not args.relations:
            raise CliError("supervised_finetune needs --relations")
        label_ids = evaluation.read_relation_map(data_path(args.relations))
        labels = [n for n, _ in sorted(label_ids.items(), key=lambda kv: kv[1])]
        if head is None or head.num_classes != len(labels):
            nil = label_ids.get(args.nil) if args.nil else None
            head = ClassifierHead(len(labels), model.config.rep_dim, nil, labels, seed=cfg.seed, dtype=model.dtype)
    out = data_path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint(step, m, h):
        training.save_checkpoint(out / f"step{step:06d}", m, vocab, h, {"step": step})

    res = training.train(model, data, cfg, head, label_ids, on_checkpoint=checkpoint, metrics_path=out / "metrics.jsonl")
    training.save_checkpoint(out, res.model, vocab, res.head if cfg.mode == "supervised_finetune" else head, {"mode": cfg.mode, "steps": res.steps})
    last = res.metrics[-1] if res.metrics else {}
    return {"steps": res.steps, "final_loss": last.get("loss")}


# ------------------------------------------------------------------- eval


def _emit_report(report: evaluation.EvalReport, args) -> dict:
    if args.out:
        _write_json(data_path(args.out), report.to_json())
    if args.text:
        print(report.render())
    return report.metrics


def cmd_eval_fewshot(args) -> dict:
    model, vocab, _, _ = training.load_checkpoint(data_path(args.checkpoint))
    records = _load_labeled(args.data, vocab, _csv(args.types), _csv(args.exclude) or ())
    episodes = evaluation.build_episodes(records, args.n_way, args.k_shot, args.episodes, args.seed, distinct_key=args.distinct_key)
    return _emit_report(evaluation.evaluate_fewshot(model, episodes, records, args.aggregate), args)


def cmd_eval_supervised(args) -> dict:
    model, vocab, head, _ = training.load_checkpoint(data_path(args.checkpoint))
    if head is None:
        raise CliError("checkpoint has no classifier head; train with --mode supervised_finetune first")
    label_ids = evaluation.read_relation_map(data_path(args.relations))
    records = _load_labeled(args.data, vocab, _csv(args.types), _csv(args.exclude) or ())
    return _emit_report(evaluation.evaluate_supervised(model, head, records, label_ids), args)


def _parse_grid(items: list[str]) -> dict:
    grid = {}
    for item in items:
        kind, _, values = item.partition("=")
        if kind not in evaluation.GRID_KINDS or not values:
            raise CliError(f"bad --grid {item!r}; expected KIND=v1,v2 with KIND in {evaluation.GRID_KINDS}")
        conv = float if kind == "fraction" else int
        grid[kind] = [conv(v) for v in values.split(",")]
    return grid


def cmd_sweep(args) -> dict:
    if args.checkpoint:
        base, vocab, _, _ = training.load_checkpoint(data_path(args.checkpoint))
        enc_cfg = base.config
        state = {k: v.clone() for k, v in base.state_dict().items()}
    else:
        if not args.vocab:
            raise CliError("sweep needs --checkpoint or --vocab")
        vocab = Vocabulary.load(data_path(args.vocab))
        enc_cfg = _encoder_config(_config_file(args.config).get("encoder", {}), vocab, args.seed)
        state = None
    label_ids = evaluation.read_relation_map(data_path(args.relations))
    labels = [n for n, _ in sorted(label_ids.items(), key=lambda kv: kv[1])]
    nil = label_ids.get(args.nil) if args.nil else None
    exclude = _csv(args.exclude) or ()
    train_set = _load_labeled(args.train, vocab, _csv(args.types), exclude)
    eval_set = _load_labeled(args.eval, vocab, _csv(args.types), exclude)
    overrides = {"mode": "supervised_finetune", "steps": args.steps, "lr": args.lr}
    if args.config:
        base_cfg = training.TrainConfig.from_file(data_path(args.config), **overrides)
    else:
        base_cfg = training.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    heads = {}

    def factory():
        m = EncoderModel(enc_cfg)
        if state is not None:
            m.load_state_dict(state)
        return m

    def finetune(model, subset, seed):
        cfg = training.TrainConfig(**{**base_cfg.__dict__, "seed": seed})
        head = ClassifierHead(len(labels), model.config.rep_dim, nil, labels, seed=seed, dtype=model.dtype)
        res = training.train(model, subset, cfg, head, label_ids)
        heads[id(res.model)] = res.head
        return res.model

    def score(model, records):
        head = heads.get(id(model))
        if head is None:
            # zero annotations: task-agnostic exemplar matching on the untuned encoder
            n_way = min(args.n_way, len({r.relation for r in records}))
            episodes = evaluation.build_episodes(records, n_way, 1, args.episodes, args.seed)
            return evaluation.evaluate_fewshot(model, episodes, records).metrics["accuracy"]
        return evaluation.evaluate_supervised(model, head, records, label_ids).metrics[args.metric]

    rows = evaluation.ablation_sweep(factory, train_set, _parse_grid(args.grid), eval_set, finetune, score, [int(s) for s in _csv(args.seeds)])
    evaluation.write_sweep(data_path(args.out), rows)
    return {"rows": len(rows)}


# ------------------------------------------------------------------- plot


def cmd_plot(args) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = data_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if args.metrics:
        rows = []
        for path in args.metrics:
            for _, rec in io.read_jsonl(data_path(path), "mtb.metrics"):
                rows.append({"run": Path(path).parent.name or str(path), **rec})
        keys = sorted({k for r in rows for k in r if k not in ("run", "step") and isinstance(r[k], (int, float))})
        _write_csv(out.with_name(out.name + "_metrics.csv"), ["run", "step", *keys], rows)
        fig, axes = plt.subplots(len(keys), 1, figsize=(6, 2.2 * len(keys)), squeeze=False)
        for ax, key in zip(axes[:, 0], keys):
            for run in dict.fromkeys(r["run"] for r in rows):
                pts = [(r["step"], r[key]) for r in rows if r["run"] == run and key in r]
                if pts:
                    ax.plot(*zip(*pts), marker=".", label=run)
            ax.set_ylabel(key)
        axes[-1, 0].set_xlabel("step")
        axes[0, 0].legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out.with_name(out.name + "_metrics.png"), dpi=100)
        plt.close(fig)
        written += [out.name + "_metrics.csv", out.name + "_metrics.png"]
    if args.sweep:
        rows = []
        for path in args.sweep:
            rows += [{"run": Path(path).stem, **r} for r in evaluation.read_sweep(data_path(path))]
        _write_csv(out.with_name(out.name + "_sweep.csv"), ["run", "kind", "value", "seed", "n_train", "accuracy"], rows)
        kinds = sorted({r["kind"] for r in rows})
        fig, axes = plt.subplots(1, max(1, len(kinds)), figsize=(5 * max(1, len(kinds)), 3.5), squeeze=False)
        for ax, kind in zip(axes[0], kinds):
            for run in dict.fromkeys(r["run"] for r in rows):
                sel = [r for r in rows if r["run"] == run and r["kind"] == kind]
                values = sorted({r["value"] for r in sel})
                med = [float(np.median([r["accuracy"] for r in sel if r["value"] == v])) for v in values]
                ax.plot(values, med, marker="o", label=run)
            ax.set_xlabel(kind)
            ax.set_ylabel("accuracy")
            if kind == "fraction":
                ax.set_xscale("log")
            ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out.with_name(out.name + "_sweep.png"), dpi=100)
        plt.close(fig)
        written += [out.name + "_sweep.csv", out.name + "_sweep.png"]
    if not written:
        raise CliError("nothing to plot; pass --metrics and/or --sweep")
    return {"written": written}


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtb", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a templated synthetic corpus")
    s.add_argument("--relations", type=int, default=12)
    s.add_argument("--templates", type=int, default=4)
    s.add_argument("--entities", type=int, default=200)
    s.add_argument("--docs", type=int, default=2000)
    s.add_argument("--eval-docs", type=int, default=0)
    s.add_argument("--sentences-per-doc", type=int, default=2)
    s.add_argument("--window", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="documents -> relation statements")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab", required=True, help="vocabulary file; built from the documents if missing")
    s.add_argument("--window", type=int, default=40)
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--cap", type=int, default=0, help="max statements per entity (0: no cap)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("pairgen", help="statements -> blanked statement pairs")
    s.add_argument("--in", dest="input")
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.7)
    s.add_argument("--pos-fraction", type=float, default=0.5)
    s.add_argument("--hard-fraction", type=float, default=1.0)
    s.add_argument("--max-pairs", type=int, default=10000)
    s.add_argument("--exclude-same-doc", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pairgen)

    s = sub.add_parser("train", help="pretrain or fine-tune an encoder")
    s.add_argument("--mode", choices=training.MODES)
    s.add_argument("--config")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vocab")
    s.add_argument("--init", help="checkpoint to start from")
    s.add_argument("--relations", help="relation name -> id map (supervised)")
    s.add_argument("--nil", default=synth.NIL, help="label excluded from micro-F1 if present")
    s.add_argument("--types")
    s.add_argument("--exclude", default=None)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    esub = e.add_subparsers(dest="eval_command", required=True)
    s = esub.add_parser("fewshot")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--n-way", type=int, default=5)
    s.add_argument("--k-shot", type=int, default=1)
    s.add_argument("--episodes", type=int, default=1000)
    s.add_argument("--aggregate", choices=("max", "mean"), default="max")
    s.add_argument("--distinct-key", default=None, help="meta field the query may not share with its own supports")
    s.add_argument("--types")
    s.add_argument("--exclude", default=synth.NIL)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--text", action="store_true")
    s.set_defaults(func=cmd_eval_fewshot)

    s = esub.add_parser("supervised")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--relations", required=True)
    s.add_argument("--types")
    s.add_argument("--exclude", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--text", action="store_true")
    s.set_defaults(func=cmd_eval_supervised)

    for parent, name in ((esub, "sweep"), (sub, "sweep")):
        s = parent.add_parser(name, help="accuracy versus amount of fine-tuning data")
        s.add_argument("--checkpoint", help="pretrained encoder; omit (with --vocab) to start from scratch")
        s.add_argument("--vocab")
        s.add_argument("--config")
        s.add_argument("--train", nargs="+", required=True)
        s.add_argument("--eval", nargs="+", required=True)
        s.add_argument("--relations", required=True)
        s.add_argument("--nil", default=synth.NIL)
        s.add_argument("--grid", nargs="+", required=True, help="KIND=v1,v2 ...")
        s.add_argument("--seeds", default="0")
        s.add_argument("--metric", default="accuracy", choices=("accuracy", "micro_f1"))
        s.add_argument("--n-way", type=int, default=5, help="episode width for the zero-annotation point")
        s.add_argument("--episodes", type=int, default=1000)
        s.add_argument("--types")
        s.add_argument("--exclude", default=None)
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("plot", help="render metrics logs and sweep tables to PNG + CSV")
    s.add_argument("--metrics", nargs="*")
    s.add_argument("--sweep", nargs="*")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_plot)
    return p


def error_record(exc: BaseException) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, io.FormatError):
        rec["path"] = exc.path
        rec["line"] = exc.line
    return rec


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        result = args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(json.dumps(error_record(exc), sort_keys=True), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"ok": True, "command": args.command, **(result or {})}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
