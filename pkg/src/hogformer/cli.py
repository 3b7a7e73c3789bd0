"""Command-line entry point: ``hogformer <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Runtime failures
print one line ``hogformer-error: <Kind>: <message>`` to stderr. Log lines
go to stderr with ISO-8601 timestamps; machine-readable results are JSON
or CSV.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys

import numpy as np

from .config import PRESETS, ModelConfig, ablation_config, preset

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

log = logging.getLogger("hogformer")

ERROR_PREFIX = "hogformer-error"

TRAIN_KEYS = {"manifest", "crop", "batch", "steps", "lr", "min_lr", "seed", "flips", "alpha", "beta",
              "eval_every", "eval_images", "prefetch"}  # fmt: skip
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


class UsageError(Exception):
    pass


class _Formatter(logging.Formatter):
    def formatTime(self, record, datefmt=None):
        ts = datetime.datetime.fromtimestamp(record.created).astimezone()
        return ts.isoformat(timespec="milliseconds")


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("hogformer")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _read_toml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    # optional [model] / [train] tables are flattened; top-level keys win
    flat = {}
    for table in ("model", "train"):
        if isinstance(data.get(table), dict):
            flat.update(data.pop(table))
    flat.update(data)
    return flat


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_config(args, need_train: bool) -> tuple[ModelConfig, dict]:
    """Merge (preset defaults) < (TOML file) < (command-line flags)."""
    values = _read_toml(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        values[key.strip()] = _parse_value(text.strip())
    flag_map = {
        "preset": "preset", "manifest": "manifest", "steps": "steps", "lr": "lr", "seed": "seed",
        "batch": "batch", "crop": "crop", "n_bin": "n_bin", "ldr_patch": "ldr_patch",
        "alpha": "alpha", "beta": "beta", "eval_every": "eval_every",
    }  # fmt: skip
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    for comp in ("ldrconv", "dhogsa", "diff", "hog_loss"):
        if getattr(args, f"no_{comp}", False):
            values[comp] = False
    if getattr(args, "no_flips", False):
        values["flips"] = False

    unknown = sorted(set(values) - MODEL_KEYS - TRAIN_KEYS - {"preset", "ablation_row"})
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    base = preset(values.pop("preset", "tiny"))
    row = values.pop("ablation_row", None)
    if getattr(args, "ablation_row", None) is not None:
        row = args.ablation_row
    if row is not None:
        base = ablation_config(int(row), base)
    model_vals = base.to_dict()
    model_vals.update({k: v for k, v in values.items() if k in MODEL_KEYS})
    cfg = ModelConfig.from_dict(model_vals).validate()
    train_vals = {k: v for k, v in values.items() if k in TRAIN_KEYS} if need_train else {}
    return cfg, train_vals


def _echo(kind: str, payload: dict) -> None:
    log.info("resolved %s config: %s", kind, json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .train import TrainConfig, train_loop

    cfg, train_vals = resolve_config(args, need_train=True)
    tcfg = TrainConfig(model=cfg, **train_vals)
    _echo("train", tcfg.to_dict())
    result = train_loop(tcfg, checkpoint_path=args.out)
    last = result.rows[-1] if result.rows else {}
    log.info("wrote %s after %d steps in %.1fs", args.out, len(result.rows), result.seconds)
    print(json.dumps({"checkpoint": args.out, "steps": len(result.rows), "final": last}))
    return 0


def cmd_restore(args) -> int:
    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .data import load_image, save_image
    from .model import forward_restore

    ck = load_checkpoint(args.ckpt)
    _echo("model", ck.model.config.to_dict())
    img = load_image(getattr(args, "in"))
    with T.no_grad(), T.default_dtype(np.float32):
        out = forward_restore(ck.model, img, clamp=True)
    save_image(out.data, args.out)
    log.info("restored %s -> %s", getattr(args, "in"), args.out)
    return 0


def cmd_eval(args) -> int:
    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .data import iterate, read_manifest
    from .train import evaluate

    ck = load_checkpoint(args.ckpt)
    _echo("model", ck.model.config.to_dict())
    samples = list(iterate(read_manifest(args.manifest)))
    with T.default_dtype(np.float32):
        report = evaluate(ck.model, samples)
    text = json.dumps(report.to_json(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        log.info("wrote %s (mean psnr %.3f, ssim %.4f)", args.out, report.mean_psnr, report.mean_ssim)
    else:
        print(text)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import SUITE_TOLERANCE, run_suite

    def report(r):
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.target},{r.group},{r.error:.3e},{status},{r.seconds:.1f}s", flush=True)

    print("target,group,max_rel_error,status,time")
    results = run_suite(args.module, report=report)
    worst = max((r.error for r in results), default=0.0)
    log.info("max relative error %.3e (tolerance %.0e)", worst, SUITE_TOLERANCE)
    return 0 if all(r.passed for r in results) else 1


def cmd_hog_profile(args) -> int:
    from .data import iterate, read_manifest
    from .hog import profile_samples

    manifest = read_manifest(args.manifest)
    report = profile_samples(((s.spec.kind, s.degraded) for s in iterate(manifest)), n_bin=args.n_bin or 9)
    report.write(args.out)
    hits, total = report.separated_pairs()
    log.info("loo accuracy %.3f, separated pairs %d/%d", report.accuracy, hits, total)
    print(json.dumps({"out": args.out, "loo_accuracy": report.accuracy, "separated_pairs": hits, "total_pairs": total}))
    return 0


def _parse_spec(text: str, seed: int | None):
    from .data import DegradationSpec

    if os.path.isfile(text):
        with open(text) as fh:
            d = json.load(fh)
    elif text.lstrip().startswith("{"):
        d = json.loads(text)
    else:
        d = {"kind": text}
    if seed is not None:
        d["seed"] = seed
    return DegradationSpec.from_dict(d)


def cmd_degrade(args) -> int:
    from .data import degrade, load_image, save_image

    spec = _parse_spec(args.spec, args.seed)
    log.info("degradation spec: %s", json.dumps(spec.to_dict(), sort_keys=True))
    save_image(degrade(load_image(getattr(args, "in")), spec), args.out)
    return 0


def cmd_param_count(args) -> int:
    from .model import build_model
    from .paramcount import count_parameters

    cfg, _ = resolve_config(args, need_train=False)
    _echo("model", cfg.to_dict())
    closed = count_parameters(cfg)
    built = build_model(cfg).num_parameters()
    print(json.dumps({"closed_form": closed, "constructed": built, "match": closed == built}))
    return 0 if closed == built else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with flat ModelConfig/TrainConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default tiny)")
    p.add_argument("--ablation-row", type=int, choices=range(5), help="component row 0-4 (0 = all off)")
    p.add_argument("--n-bin", dest="n_bin", type=int, help="orientation bins")
    p.add_argument("--ldr-patch", dest="ldr_patch", type=int, help="LDRConv patch size")
    for comp in ("ldrconv", "dhogsa", "diff", "hog-loss"):
        p.add_argument(f"--no-{comp}", action="store_true", help=f"disable {comp}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hogformer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a model; writes checkpoint and loss CSV")
    _model_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.hogf); logs are written beside it")
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--no-flips", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, metavar="IMAGE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="64-bit finite-difference gradient suite")
    p.add_argument("--module", default="all", choices=["all", "hog", "blocks", "model", "loss"])
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("hog-profile", help="HOG degradation signatures and confusion")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-bin", dest="n_bin", type=int)
    p.set_defaults(func=cmd_hog_profile)

    p = sub.add_parser("degrade", help="write one synthetic degraded sample")
    p.add_argument("--in", required=True, metavar="IMAGE")
    p.add_argument("--spec", required=True, help="kind name, JSON object, or JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("param-count", help="closed-form vs constructed parameter count")
    _model_flags(p)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{ERROR_PREFIX}: UsageError: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(f"{ERROR_PREFIX}: Interrupted: stopped by user", file=sys.stderr)
        return 1
    except Exception as exc:  # every runtime failure becomes one parsable line
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"{ERROR_PREFIX}: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
