"""Command-line entry point.

Subcommands: synth | train | eval | audit. Every command echoes its
effective configuration to <out>/run_config.json so a run is reproducible
from its seed and config alone. Outputs land under the user-named directory,
resolved against the CROWDFUSE_OUT environment variable when set.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import audit as audit_mod
from . import synth as synth_mod
from .data import dataset_digest, load_all, load_manifest
from .errors import CrowdfuseError, NumericError
from .metrics import evaluate
from .models import VARIANT_KINDS, VARIANT_PRESETS, build_model, load_checkpoint, save_checkpoint
from .train import Hyperparams, train


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def resolve_out(out: str) -> Path:
    """User-named run directory, under $CROWDFUSE_OUT unless absolute."""
    path = Path(out)
    if path.is_absolute():
        return path
    return Path(os.environ.get("CROWDFUSE_OUT", ".")) / path


def _echo_run_config(args: argparse.Namespace, out_dir: Path) -> None:
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k not in ("func",) and not k.startswith("_")
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    out_dir = resolve_out(args.out)
    _echo_run_config(args, out_dir)
    if args.spec_file:
        specs = _load_spec_file(args.spec_file)
    elif args.preset:
        specs = synth_mod.PRESETS[args.preset](seed=args.seed)
    else:
        specs = [
            synth_mod.SynthSpec(
                width=args.width,
                height=args.height,
                count=args.count,
                brightness_target=args.brightness,
                seed=synth_mod._child_seed(args.seed, i),
            )
            for i in range(args.n)
        ]
    manifest = synth_mod.generate_dataset(specs, out_dir)
    digest = dataset_digest(manifest)
    print(f"wrote {len(manifest)} samples to {out_dir}")
    print(f"dataset sha256: {digest}")
    return 0


def _load_spec_file(path) -> list[synth_mod.SynthSpec]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    allowed = set(synth_mod.SynthSpec.__dataclass_fields__)
    specs = []
    for i, record in enumerate(raw):
        unknown = set(record) - allowed
        if unknown:
            raise CrowdfuseError(f"spec {i} has unknown keys: {sorted(unknown)}")
        record["modality_visibility"] = tuple(record.get("modality_visibility", (1.0, 1.0)))
        specs.append(synth_mod.SynthSpec(**record))
    return specs


def _hyperparams_from_args(args) -> Hyperparams:
    return Hyperparams(
        crop=args.crop,
        flip_prob=args.flip_prob,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch=args.batch,
        epochs=args.epochs,
        sigma=args.sigma,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    out_dir = resolve_out(args.out)
    _echo_run_config(args, out_dir)
    manifest = load_manifest(args.manifest)
    samples = load_all(manifest)
    variant = VARIANT_PRESETS[args.model_preset](
        args.variant,
        six_channel_early=args.six_channel_early,
        thermal_channels=args.thermal_channels,
    )
    model = build_model(variant, seed=args.seed)
    hp = _hyperparams_from_args(args)
    try:
        result = train(
            model, samples, hp, out_dir=out_dir, keep_checkpoints=args.keep_checkpoints
        )
    except NumericError as exc:
        with open(out_dir / "diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump(exc.diagnostics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        raise
    with open(out_dir / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, value in enumerate(result.history, start=1):
            fh.write(f"{epoch},{value!r}\n")
    save_checkpoint(model, out_dir / "checkpoint_final.pt", {"epochs": hp.epochs})
    final = result.history[-1] if result.history else float("nan")
    print(f"trained {args.variant} for {hp.epochs} epoch(s), {result.steps} step(s)")
    print(f"final mean loss: {final}")
    return 0


def cmd_eval(args) -> int:
    out_dir = resolve_out(args.out)
    _echo_run_config(args, out_dir)
    model, _ = load_checkpoint(args.checkpoint)
    if args.variant is not None and args.variant != model.variant.kind:
        raise CrowdfuseError(
            f"checkpoint variant {model.variant.kind!r} does not match requested {args.variant!r}"
        )
    manifest = load_manifest(args.manifest)
    samples = load_all(manifest)
    result = evaluate(model, samples)
    with open(out_dir / "eval.json", "w", encoding="utf-8") as fh:
        json.dump({"mae": result.mae, "rmse": result.rmse, "n": result.n}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "per_sample.csv", "w", encoding="utf-8") as fh:
        fh.write("index,y,yhat\n")
        for i, (y, yhat) in enumerate(result.per_sample):
            fh.write(f"{i},{y!r},{yhat!r}\n")
    print(f"mae={result.mae:.4f} rmse={result.rmse:.4f} n={result.n}")
    return 0


def cmd_audit(args) -> int:
    out_dir = resolve_out(args.out)
    _echo_run_config(args, out_dir)
    manifest = load_manifest(args.manifest)
    cfg = audit_mod.AuditConfig(
        r_threshold=args.r_threshold,
        fraction=args.fraction,
        seed=args.seed,
    )
    report = audit_mod.run_audit(manifest, out_dir, cfg)
    sys.stdout.write(audit_mod.report_to_text(report))
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="crowdfuse",
        description="RGB-thermal crowd counting: synthetic data, training, evaluation, audits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", choices=sorted(synth_mod.PRESETS), default=None)
    p.add_argument("--spec-file", default=None, help="JSON list of sample specs")
    p.add_argument("--n", type=_positive_int, default=10, help="samples for the custom preset")
    p.add_argument("--count", type=_nonneg_int, default=5)
    p.add_argument("--width", type=_positive_int, default=64)
    p.add_argument("--height", type=_positive_int, default=64)
    p.add_argument("--brightness", type=float, default=127.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON config file; flags win")
    p.set_defaults(func=cmd_synth)
    subparsers["synth"] = p

    p = sub.add_parser("train", help="train a counting model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANT_KINDS, default="mono_thermal")
    p.add_argument("--model-preset", choices=sorted(VARIANT_PRESETS), default="tiny")
    p.add_argument("--six-channel-early", action="store_true")
    p.add_argument("--thermal-channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--crop", type=_positive_int, default=256)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--epochs", type=_nonneg_int, default=60)
    p.add_argument("--sigma", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-checkpoints", action="store_true")
    p.add_argument("--config", default=None, help="JSON config file; flags win")
    p.set_defaults(func=cmd_train)
    subparsers["train"] = p

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANT_KINDS, default=None,
                   help="fail if the checkpoint was trained as a different variant")
    p.add_argument("--config", default=None, help="JSON config file; flags win")
    p.set_defaults(func=cmd_eval)
    subparsers["eval"] = p

    p = sub.add_parser("audit", help="bias-audit a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-threshold", type=float, default=-0.3)
    p.add_argument("--config", default=None, help="JSON config file; flags win")
    p.set_defaults(func=cmd_audit)
    subparsers["audit"] = p

    return parser, subparsers


def _parse(argv) -> argparse.Namespace:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = subparsers[args.command]
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)  # explicit flags win over config values
    return args


def main(argv=None) -> int:
    args = _parse(sys.argv[1:] if argv is None else list(argv))
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (CrowdfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
