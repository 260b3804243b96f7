"""Few-shot episodes, supervised metrics and data-ablation sweeps."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from . import io
from .tokens import CLS_ID, SEP_ID, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledStatement:
    """A relation statement with a gold relation name.

    ``x`` includes [CLS]/[SEP]; spans index into ``x``. ``meta`` carries
    provenance such as the template id, entity ids and document id.
    """

    x: tuple[int, ...]
    s1: tuple[int, int]
    s2: tuple[int, int]
    relation: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def to_json(self, vocab: Vocabulary) -> dict:
        rec = {
            "tokens": vocab.decode(self.x[1:-1]),
            "s1": [self.s1[0] - 1, self.s1[1] - 1],
            "s2": [self.s2[0] - 1, self.s2[1] - 1],
            "relation": self.relation,
        }
        rec.update({k: v for k, v in self.meta.items() if k not in rec})
        return rec

    @classmethod
    def from_json(cls, rec: dict, vocab: Vocabulary) -> "LabeledStatement":
        x = (CLS_ID, *vocab.encode(rec["tokens"]), SEP_ID)
        s1 = (int(rec["s1"][0]) + 1, int(rec["s1"][1]) + 1)
        s2 = (int(rec["s2"][0]) + 1, int(rec["s2"][1]) + 1)
        if not (0 < s1[0] < s1[1] <= s2[0] < s2[1] <= len(x) - 1):
            raise ValueError(f"invalid spans s1={rec['s1']} s2={rec['s2']}")
        meta = {k: v for k, v in rec.items() if k not in ("tokens", "s1", "s2", "relation")}
        return cls(x, s1, s2, str(rec["relation"]), meta)


def read_labeled(path: str | Path, vocab: Vocabulary) -> list[LabeledStatement]:
    out = []
    for lineno, rec in io.read_jsonl(path, "mtb.labeled"):
        try:
            out.append(LabeledStatement.from_json(rec, vocab))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise io.FormatError(f"bad labeled record ({exc})", str(path), lineno) from None
    return out


def write_labeled(path: str | Path, records: Iterable[LabeledStatement], vocab: Vocabulary) -> int:
    return io.write_jsonl(path, "mtb.labeled", (r.to_json(vocab) for r in records))


def write_relation_map(path: str | Path, names: Sequence[str]) -> dict[str, int]:
    mapping = {n: i for i, n in enumerate(names)}
    Path(path).write_text(json.dumps(mapping, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return mapping


def read_relation_map(path: str | Path) -> dict[str, int]:
    mapping = json.loads(Path(path).read_text(encoding="utf-8"))
    if sorted(mapping.values()) != list(range(len(mapping))):
        raise ValueError(f"{path}: relation ids must be dense 0..K-1")
    return {str(k): int(v) for k, v in mapping.items()}


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    classes: list[str]
    support: list[list[int]]  # N lists of K record indices
    query: int
    true_class: int

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])


def build_episodes(
    records: Sequence[LabeledStatement],
    n_way: int,
    k_shot: int,
    count: int,
    seed: int,
    types: Sequence[str] | None = None,
    distinct_key: str | None = None,
) -> list[Episode]:
    """Sample ``count`` N-way K-shot episodes over ``types`` (default: every type present).

    Within an episode nothing is drawn twice. With ``distinct_key`` the query
    never shares ``meta[distinct_key]`` with a support statement of its own
    class, e.g. ``"template"`` to forbid lexical copies of the query.
    """
    by_type: dict[str, list[int]] = {}
    for idx, r in enumerate(records):
        by_type.setdefault(r.relation, []).append(idx)
    pool = sorted(types) if types is not None else sorted(by_type)
    if len(pool) < n_way:
        raise ValueError(f"need at least {n_way} relation types, have {len(pool)}")
    for t in pool:
        have = len(by_type.get(t, ()))
        if have < k_shot + 1:
            raise ValueError(f"relation type {t!r} has {have} statements, needs {k_shot + 1}")
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(count):
        classes = [pool[i] for i in rng.choice(len(pool), n_way, replace=False)]
        true_class = int(rng.integers(n_way))
        support = []
        query = -1
        for c, rel in enumerate(classes):
            ids = by_type[rel]
            if c != true_class:
                support.append([ids[i] for i in rng.choice(len(ids), k_shot, replace=False)])
                continue
            query = ids[int(rng.integers(len(ids)))]
            cands = [i for i in ids if i != query]
            if distinct_key is not None:
                key = records[query].meta.get(distinct_key)
                cands = [i for i in cands if records[i].meta.get(distinct_key) != key]
            if len(cands) < k_shot:
                raise ValueError(f"relation type {rel!r} lacks {k_shot} supports distinct from the query")
            support.append([cands[i] for i in rng.choice(len(cands), k_shot, replace=False)])
        episodes.append(Episode(classes, support, query, true_class))
    return episodes


# ----------------------------------------------------------------- reports


@dataclass
class EvalReport:
    metrics: dict
    per_class: dict
    confusion: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        lines = [f"{k:>12}: {v:.4f}" if isinstance(v, float) else f"{k:>12}: {v}" for k, v in self.metrics.items()]
        lines.append("")
        lines.append(f"{'class':>16} " + " ".join(f"{h:>9}" for h in next(iter(self.per_class.values()), {}).keys()))
        for name, row in self.per_class.items():
            cells = " ".join(f"{v:>9.4f}" if isinstance(v, float) else f"{v:>9}" for v in row.values())
            lines.append(f"{name:>16} {cells}")
        return "\n".join(lines)


def binomial_interval(correct: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(correct, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def chance_interval(n: int, n_way: int, level: float = 0.99) -> tuple[float, float]:
    """Central interval of accuracy for ``n`` guesses at chance 1/N."""
    lo, hi = stats.binom.interval(level, n, 1.0 / n_way)
    return lo / n, hi / n


def score_episodes(reps: torch.Tensor | np.ndarray, episodes: Sequence[Episode], aggregate: str = "max") -> np.ndarray:
    """Predicted class index per episode from precomputed representations."""
    reps = np.asarray(reps.detach().cpu() if isinstance(reps, torch.Tensor) else reps, dtype=np.float64)
    preds = np.empty(len(episodes), dtype=np.int64)
    for e, ep in enumerate(episodes):
        q = reps[ep.query]
        scores = []
        for sup in ep.support:
            s = reps[sup] @ q
            scores.append(s.max() if aggregate == "max" else s.mean())
        preds[e] = int(np.argmax(scores))
    return preds


def evaluate_fewshot(
    model,
    episodes: Sequence[Episode],
    records: Sequence[LabeledStatement],
    aggregate: str = "max",
    reps=None,
) -> EvalReport:
    """Accuracy of exemplar matching by inner product.

    Class score is the max (or mean) dot product with its K supports.
    ``reps`` may supply precomputed representations indexed like ``records``.
    """
    if aggregate not in ("max", "mean"):
        raise ValueError("aggregate must be 'max' or 'mean'")
    if reps is None:
        used = sorted({i for ep in episodes for i in [ep.query, *(j for s in ep.support for j in s)]})
        sub = model.represent_statements([records[i] for i in used])
        reps = np.zeros((len(records), sub.shape[1]))
        reps[used] = sub.detach().double().numpy()
    preds = score_episodes(reps, episodes, aggregate)
    truth = np.array([ep.true_class for ep in episodes])
    correct = int((preds == truth).sum())
    n = len(episodes)
    lo, hi = binomial_interval(correct, n) if n else (0.0, 0.0)
    names = sorted({c for ep in episodes for c in ep.classes})
    pos = {c: i for i, c in enumerate(names)}
    conf = np.zeros((len(names), len(names)), dtype=np.int64)
    for ep, p in zip(episodes, preds):
        conf[pos[ep.classes[ep.true_class]], pos[ep.classes[p]]] += 1
    per_class = {c: {"n": int(conf[i].sum()), "correct": int(conf[i, i])} for c, i in pos.items()}
    return EvalReport(
        metrics={"accuracy": correct / n if n else 0.0, "ci95_low": lo, "ci95_high": hi, "n": n, "correct": correct},
        per_class=per_class,
        confusion={"labels": names, "matrix": conf.tolist()},
        config={"n_way": episodes[0].n_way if n else 0, "k_shot": episodes[0].k_shot if n else 0, "aggregate": aggregate},
    )


def confusion_matrix(gold: Sequence[int], pred: Sequence[int], num_classes: int) -> np.ndarray:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(gold, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return conf


def micro_prf(conf: np.ndarray, nil_index: int | None = None) -> tuple[float, float, float]:
    """Micro precision / recall / F1 over every class except ``nil_index``."""
    keep = [c for c in range(conf.shape[0]) if c != nil_index]
    tp = sum(conf[c, c] for c in keep)
    predicted = conf[:, keep].sum()
    actual = conf[keep, :].sum()
    p = tp / predicted if predicted else 0.0
    r = tp / actual if actual else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f)


def supervised_report(gold: Sequence[int], pred: Sequence[int], labels: Sequence[str], nil_index: int | None = None, config: dict | None = None) -> EvalReport:
    conf = confusion_matrix(gold, pred, len(labels))
    p, r, f = micro_prf(conf, nil_index)
    n = int(conf.sum())
    per_class = {}
    for c, name in enumerate(labels):
        tp, col, row = conf[c, c], conf[:, c].sum(), conf[c, :].sum()
        pc = tp / col if col else 0.0
        rc = tp / row if row else 0.0
        per_class[name] = {
            "precision": float(pc),
            "recall": float(rc),
            "f1": float(2 * pc * rc / (pc + rc)) if pc + rc else 0.0,
            "support": int(row),
        }
    return EvalReport(
        metrics={"micro_precision": p, "micro_recall": r, "micro_f1": f, "accuracy": float(np.trace(conf) / n) if n else 0.0, "n": n},
        per_class=per_class,
        confusion={"labels": list(labels), "matrix": conf.tolist()},
        config=dict(config or {}, nil_index=nil_index),
    )


@torch.no_grad()
def predict_supervised(model, head, records: Sequence[LabeledStatement], batch_size: int = 256) -> np.ndarray:
    reps = model.represent_statements(records, batch_size)
    return head(reps).argmax(-1).numpy()


def evaluate_supervised(model, head, records: Sequence[LabeledStatement], label_ids: dict[str, int]) -> EvalReport:
    """Micro P/R/F1 excluding the head's nil class, plus accuracy and per-class rows."""
    if len(label_ids) != head.num_classes:
        raise ValueError(f"head has {head.num_classes} classes but the label map has {len(label_ids)}")
    try:
        gold = [label_ids[r.relation] for r in records]
    except KeyError as exc:
        raise ValueError(f"unseen relation label {exc.args[0]!r}") from None
    pred = predict_supervised(model, head, records)
    labels = [name for name, _ in sorted(label_ids.items(), key=lambda kv: kv[1])]
    return supervised_report(gold, pred, labels, head.nil_index)


# ------------------------------------------------------------------ sweeps

GRID_KINDS = ("examples_per_type", "types_count", "fraction")


def subsample(records: Sequence[LabeledStatement], kind: str, value, seed: int) -> list[LabeledStatement] | None:
    """Seeded training subset for one grid point; ``None`` if infeasible."""
    rng = np.random.default_rng(seed)
    by_type: dict[str, list[int]] = {}
    for idx, r in enumerate(records):
        by_type.setdefault(r.relation, []).append(idx)
    types = sorted(by_type)
    if kind == "examples_per_type":
        value = int(value)
        if any(len(by_type[t]) < value for t in types):
            return None
        keep = [i for t in types for i in rng.choice(by_type[t], value, replace=False)]
    elif kind == "types_count":
        value = int(value)
        if value > len(types):
            return None
        chosen = [types[i] for i in rng.choice(len(types), value, replace=False)]
        keep = [i for t in chosen for i in by_type[t]]
    elif kind == "fraction":
        if not 0 <= value <= 1:
            return None
        n = int(round(value * len(records)))
        if value > 0 and n == 0:
            n = 1
        keep = list(rng.choice(len(records), n, replace=False))
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    return [records[i] for i in sorted(int(i) for i in keep)]


def ablation_sweep(
    model_factory: Callable[[], object],
    train_set: Sequence[LabeledStatement],
    grid: dict,
    eval_set,
    finetune: Callable[[object, list[LabeledStatement], int], object],
    evaluate: Callable[[object, object], float],
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Accuracy versus amount of fine-tuning data.

    ``grid`` is ``{kind: [values...]}`` with kind one of ``GRID_KINDS``.
    Value 0 evaluates the untuned model. Infeasible points are skipped.
    """
    rows = []
    for kind, values in grid.items():
        if kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {kind!r}")
        for value in values:
            for seed in seeds:
                model = model_factory()
                if value == 0:
                    n_train = 0
                else:
                    subset = subsample(train_set, kind, value, seed)
                    if subset is None:
                        log.warning("skipping infeasible grid point %s=%s", kind, value)
                        break
                    n_train = len(subset)
                    model = finetune(model, subset, seed)
                rows.append({"kind": kind, "value": value, "seed": seed, "n_train": n_train, "accuracy": float(evaluate(model, eval_set))})
    return rows


def write_sweep(path: str | Path, rows: Iterable[dict]) -> int:
    return io.write_jsonl(path, "mtb.sweep", rows)


def read_sweep(path: str | Path) -> list[dict]:
    return [rec for _, rec in io.read_jsonl(path, "mtb.sweep")]
