"""Run every pipeline stage on a small synthetic corpus.

    python scripts/quickstart.py --out runs/quickstart [--tiny]

Each stage goes through the ``mtb`` command line, so this doubles as a
smoke test of the CLI wiring.
"""
import argparse
import json
import sys
from pathlib import Path

from mtb.cli import main as mtb


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ mtb " + " ".join(argv), flush=True)
    code = mtb(argv)
    if code != 0:
        sys.exit(f"stage failed: {argv[0]}")


def quickstart(out: Path, tiny: bool = False, seed: int = 0) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    docs, steps, pairs, episodes = (120, 20, 400, 100) if tiny else (2000, 600, 40000, 1000)
    encoder = {"layers": 1, "hidden": 16, "heads": 2, "max_len": 64} if tiny else {"layers": 2, "hidden": 64, "heads": 4, "max_len": 64}
    cfg = out / "train.yaml"
    cfg.write_text(json.dumps({"batch_size": 32, "log_every": 10, "lambda_mlm": 1.0, "encoder": encoder}, indent=1) + "\n")

    data = out / "data"
    run("synth", "--out", data, "--relations", 6 if tiny else 12, "--entities", 40 if tiny else 200,
        "--docs", docs, "--eval-docs", docs // 4, "--sentences-per-doc", 1, "--seed", seed)
    run("extract", "--in", data / "documents.jsonl", "--out", out / "statements.jsonl", "--vocab", data / "vocab.txt")
    run("pairgen", "--in", out / "statements.jsonl", "--out", out / "pairs.jsonl", "--max-pairs", pairs, "--seed", seed)
    run("train", "--mode", "mtb_pretrain", "--config", cfg, "--vocab", data / "vocab.txt",
        "--data", out / "pairs.jsonl", "--out", out / "mtb", "--steps", steps, "--seed", seed)
    run("eval", "fewshot", "--checkpoint", out / "mtb", "--data", data / "eval_labeled.jsonl",
        "--n-way", 5, "--k-shot", 1, "--episodes", episodes, "--distinct-key", "template", "--out", out / "fewshot.json", "--text")
    run("train", "--mode", "supervised_finetune", "--config", cfg, "--init", out / "mtb", "--data", data / "labeled.jsonl",
        "--relations", data / "relations.json", "--out", out / "supervised", "--steps", steps, "--seed", seed)
    run("eval", "supervised", "--checkpoint", out / "supervised", "--data", data / "eval_labeled.jsonl",
        "--relations", data / "relations.json", "--out", out / "supervised.json")
    run("sweep", "--checkpoint", out / "mtb", "--config", cfg, "--train", data / "labeled.jsonl",
        "--eval", data / "eval_labeled.jsonl", "--relations", data / "relations.json",
        "--grid", "fraction=0,0.1,1.0", "--seeds", "0", "--steps", steps, "--episodes", episodes, "--out", out / "sweep.jsonl")
    run("plot", "--metrics", out / "mtb" / "metrics.jsonl", out / "supervised" / "metrics.jsonl",
        "--sweep", out / "sweep.jsonl", "--out", out / "plots" / "quickstart")
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/quickstart", type=Path)
    ap.add_argument("--tiny", action="store_true", help="seconds-scale sizes for smoke testing")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    quickstart(a.out, a.tiny, a.seed)
