"""Command-line interface.

Subcommands: fixture, train, eval, score, decompose, gradcheck.
Every subcommand is deterministic given its config and --seed; numeric
output is serialized at 9 significant digits so reruns diff clean.
Log level comes from the FOBOR_LOG environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, decomposition, metrics, scoring, textenc, trainer

log = logging.getLogger("patchood")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _from_dict(cls, payload: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown keys in {section!r} section: {sorted(unknown)}")
    try:
        obj = cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc
    return obj


def load_run_config(path) -> tuple[data.FixtureSpec, trainer.TrainConfig]:
    """Parse a run-config JSON; rejects unknown keys, fills defaults."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"schema_version", "fixture", "train"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    fixture_payload = dict(doc.get("fixture", {}))
    if "confusable_pairs" in fixture_payload:
        fixture_payload["confusable_pairs"] = [tuple(p) for p in fixture_payload["confusable_pairs"]]
    spec = _from_dict(data.FixtureSpec, fixture_payload, "fixture")
    cfg = _from_dict(trainer.TrainConfig, dict(doc.get("train", {})), "train")
    try:
        spec.check()
        cfg.check()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec, cfg


def resolved_config(spec: data.FixtureSpec, cfg: trainer.TrainConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "fixture": dataclasses.asdict(spec),
        "train": dataclasses.asdict(cfg),
    }


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_json(payload, path=None) -> str:
    text = json.dumps(_round_floats(payload), indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    return text


def _load_split(data_dir, name):
    path = Path(data_dir) / f"{name}.fobo"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return data.load_dataset(path)


def _bank_inputs(args, train_ds):
    tokens = textenc.class_tokens_from_dataset(train_ds)
    if getattr(args, "checkpoint", None):
        ctx = textenc.load_prompt(args.checkpoint)
    else:
        ctx = textenc.PromptContext(np.zeros((1, train_ds.d)))
    return ctx, tokens


def cmd_fixture(args) -> int:
    spec, cfg = load_run_config(args.config)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, id_test, ood_test = data.generate_fixture(spec)
    splits = {"train": train_ds, "id_test": id_test, "ood_test": ood_test}
    for name, ds in splits.items():
        data.save_dataset(ds, out / f"{name}.fobo")
    manifest = {
        "config": resolved_config(spec, cfg),
        "splits": {name: {"records": len(ds.records)} for name, ds in splits.items()},
        "dims": {"d": spec.d, "d_k": spec.d_k, "n_patches": spec.n_patches,
                 "n_classes": spec.n_classes},
    }
    write_json(manifest, out / "manifest.json")
    log.info("wrote fixture to %s", out)
    return 0


def cmd_train(args) -> int:
    spec, cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    train_ds = _load_split(args.data, "train")
    tokens = textenc.class_tokens_from_dataset(train_ds)
    result = trainer.train(train_ds, tokens, cfg)
    textenc.save_prompt(result.context, args.out)
    history_path = Path(args.out).with_suffix(".history.csv")
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_id", "l_abs", "l_cfr", "l_total"])
        for step, b in enumerate(result.history):
            writer.writerow([step] + [f"{v:.9g}" for v in (b.l_id, b.l_abs, b.l_cfr, b.l_total)])
    log.info("wrote checkpoint %s and history %s", args.out, history_path)
    return 0


def cmd_eval(args) -> int:
    spec, cfg = load_run_config(args.config)
    train_ds = _load_split(args.data, "train")
    id_test = _load_split(args.data, "id_test")
    ood_sets = {}
    for path in sorted(Path(args.data).glob("ood_*.fobo")):
        ood_sets[path.stem] = data.load_dataset(path)
    if not ood_sets:
        raise FileNotFoundError(f"no ood_*.fobo files in {args.data}")
    ctx = textenc.load_prompt(args.checkpoint)
    tokens = textenc.class_tokens_from_dataset(train_ds)
    report = metrics.evaluate(ctx, tokens, id_test, ood_sets, tau=cfg.tau)
    text = write_json(report.to_dict(), args.out)
    if not args.out:
        print(text)
    return 0


def cmd_score(args) -> int:
    spec, cfg = load_run_config(args.config)
    train_ds = _load_split(args.data, "train")
    target = data.load_dataset(args.input)
    ctx, tokens = _bank_inputs(args, train_ds)
    bank = textenc.encode_classes(ctx, tokens)
    lines = []
    for idx, rec in enumerate(target.records):
        s = scoring.glmcm_score(scoring.posteriors(rec, bank, cfg.tau))
        lines.append(json.dumps(_round_floats({
            "record_index": idx,
            "mcm": s.mcm, "lmcm": s.lmcm, "glmcm": s.glmcm,
            "label": rec.label,
        }), sort_keys=True))
    payload = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    return 0


def cmd_decompose(args) -> int:
    spec, cfg = load_run_config(args.config)
    train_ds = _load_split(args.data, "train")
    target = data.load_dataset(args.input)
    ctx, tokens = _bank_inputs(args, train_ds)
    bank = textenc.encode_classes(ctx, tokens)
    kappa = cfg.effective_kappa(target.n_classes)
    lines = []
    for idx, rec in enumerate(target.records):
        if rec.label is None:
            continue
        pm = scoring.posteriors(rec, bank, cfg.tau)
        dec = decomposition.decompose(pm.local_probs, rec.label, kappa)
        lines.append(json.dumps({
            "index": idx,
            "fg": dec.fg.tolist(),
            "bg": dec.bg.tolist(),
            "ranks": dec.ranks.tolist(),
        }, sort_keys=True))
    payload = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    spec = data.FixtureSpec(n_classes=3, d=8, d_k=4, n_patches=4,
                            images_per_class=2, test_images_per_class=1,
                            ood_images=2, ood_classes=2, seed=seed)
    train_ds, _, _ = data.generate_fixture(spec)
    tokens = textenc.class_tokens_from_dataset(train_ds)
    ctx = textenc.init_prompt(2, spec.d, 0.05, seed)
    cfg = trainer.TrainConfig(tau=0.5, n_class=2, n_patch=2)
    batch = [train_ds.records[i] for i in rng.choice(len(train_ds.records), 4, replace=False)]
    err = trainer.fd_check(batch, ctx, tokens, cfg, eps=1e-5)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchood",
                                     description="Few-shot OOD detection pipeline on embedding fixtures")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (current implementation is serial)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate a synthetic embedding fixture")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("train", help="train the prompt context")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate AUROC / FPR95 on a fixture")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="emit per-record MCM / GL-MCM scores as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="fixture directory (for class tokens)")
    p.add_argument("--input", required=True, help="FOBO file to score")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("decompose", help="dump per-image foreground/background splits")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("gradcheck", help="verify the analytic gradient against finite differences")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FOBOR_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
