"""Synthetic experiments: few-shot after MTB pretraining, encoder variants,
low-resource fine-tuning and the untrained-encoder chance check.

    python scripts/synthetic_experiments.py fewshot --seeds 0,1,2
    python scripts/synthetic_experiments.py variants --seeds 0,1,2
    python scripts/synthetic_experiments.py low_resource --seeds 0,1,2
    python scripts/synthetic_experiments.py chance --seeds 0
    python scripts/synthetic_experiments.py all --out runs/synthetic.jsonl

One JSON line per seed and experiment goes to stdout (and to --out if given),
followed by a median summary per experiment.
"""
import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import torch

from mtb import experiments as E

EXPERIMENTS = ("fewshot", "variants", "low_resource", "chance")


def _clean(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if k not in ("model", "data")}


def run(name: str, seeds, cache: dict):
    for s in seeds:
        if name == "fewshot":
            cache[s] = E.run_mtb_fewshot(E.FewshotConfig(), s)
            yield cache[s]
        elif name == "variants":
            yield E.run_variant_comparison(E.VariantConfig(), s)
        elif name == "low_resource":
            yield E.run_low_resource(E.LowResourceConfig(), s, pretrained=cache.get(s))
        else:
            yield E.run_chance_check(E.ChanceConfig(), s)


def summarize(rows):
    keys = [k for k, v in rows[0].items() if isinstance(v, float)]
    return {k: statistics.median(r[k] for r in rows) for k in keys}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=(*EXPERIMENTS, "all"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", type=Path)
    p.add_argument("--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    seeds = [int(s) for s in args.seeds.split(",")]
    names = EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    sink = args.out.open("w") if args.out else None
    cache: dict = {}
    for name in names:
        rows = []
        for rec in run(name, seeds, cache):
            row = {"experiment": name, **_clean(rec)}
            rows.append(row)
            line = json.dumps(row, sort_keys=True)
            print(line, flush=True)
            if sink:
                sink.write(line + "\n")
        print(json.dumps({"experiment": name, "median": summarize(rows)}, sort_keys=True), flush=True)
    if sink:
        sink.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
