#!/usr/bin/env python3
"""Ablation smoke experiment on the default synthetic fixture.

Trains four prompt variants (baseline cross-entropy, background term only,
confusable-foreground term only, full objective) across several seeds and
reports GL-MCM AUROC / FPR95 per variant, plus how often each variant meets
or beats the baseline.

Usage:
    python3 scripts/run_ablation_smoke.py [--seeds 5] [--steps 500]
        [--tau 0.5] [--lr 0.002] [--out report.json]
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from patchood import data, metrics, textenc, trainer  # noqa: E402

VARIANTS = {
    "baseline": dict(alpha=0.0, beta=0.0, use_abs=False, use_cfr=False),
    "abs_only": dict(alpha=0.2, beta=0.0, use_abs=True, use_cfr=False),
    "cfr_only": dict(alpha=0.0, beta=3.0, use_abs=False, use_cfr=True),
    "full": dict(alpha=0.2, beta=3.0, use_abs=True, use_cfr=True),
}


def run_once(seed: int, args, overrides: dict) -> dict:
    spec = data.FixtureSpec(confusable_pairs=[(0, 1)], seed=seed)
    train_ds, id_test, ood_test = data.generate_fixture(spec)
    tokens = textenc.class_tokens_from_dataset(train_ds)
    cfg = trainer.TrainConfig(tau=args.tau, lr=args.lr, steps=args.steps,
                              seed=seed, **overrides)
    result = trainer.train(train_ds, tokens, cfg)
    report = metrics.evaluate(result.context, tokens, id_test,
                              {"ood": ood_test}, tau=args.tau)
    m = report.per_set["glmcm"]["ood"]
    return {"auroc": m.auroc, "fpr95": m.fpr95,
            "final_l_total": result.history[-1].l_total if result.history else None}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--tau", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=0.002)
    ap.add_argument("--out", type=Path, default=None, help="optional JSON report path")
    args = ap.parse_args(argv)

    start = time.time()
    results = {name: [run_once(seed, args, kw) for seed in range(args.seeds)]
               for name, kw in VARIANTS.items()}

    print(f"{'variant':<10} {'auroc (mean over seeds)':<26} {'fpr95':<8} vs baseline")
    base = [r["auroc"] for r in results["baseline"]]
    summary = {}
    for name, rows in results.items():
        aucs = [r["auroc"] for r in rows]
        fprs = [r["fpr95"] for r in rows]
        wins = sum(a >= b for a, b in zip(aucs, base))
        summary[name] = {"auroc_mean": float(np.mean(aucs)),
                         "fpr95_mean": float(np.mean(fprs)),
                         "wins_vs_baseline": wins, "per_seed": rows}
        tag = "-" if name == "baseline" else f"{wins}/{args.seeds} seeds >="
        print(f"{name:<10} {np.mean(aucs):<26.4f} {np.mean(fprs):<8.4f} {tag}")
    print(f"elapsed {time.time() - start:.1f}s")

    if args.out:
        args.out.write_text(json.dumps(
            {"config": vars(args) | {"out": str(args.out)}, "results": summary},
            indent=2))
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
