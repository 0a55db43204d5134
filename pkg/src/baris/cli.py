"""``baris`` command line: gen-data, train, evaluate, grad-check, param-audit.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import era, gradsuite
from .config import ConfigError, RunConfig
from .harness.backbone import AUDIT_BACKBONE, EraSettings, describe_backbone

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2

log = logging.getLogger("baris")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _range(text: str) -> tuple:
    parts = [float(s) for s in text.split(",")]
    if len(parts) != 2 or parts[0] > parts[1]:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi' with lo <= hi, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------- config resolution

def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    flag_map = [
        ("loss", "train", "loss"), ("epochs", "train", "epochs"), ("lr", "train", "learning_rate"),
        ("batch_size", "train", "batch_size"), ("seed", "train", "seed"), ("freeze", "train", "freeze"),
        ("bace_scale", "bace", "scale"), ("bace_lambda", "bace", "lam"), ("bace_pool", "bace", "pool"),
        ("gamma", "era", "gamma"), ("num_envs", "era", "num_envs"), ("data", "data", "path"),
    ]
    for attr, section, key in flag_map:
        value = getattr(args, attr, None)
        if value is not None:
            config_mod.set_value(cfg, section, key, value, f"--{attr.replace('_', '-')}")
    if getattr(args, "era", False):
        cfg.era.enabled = True
    for item in getattr(args, "set", None) or []:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        config_mod.set_value(cfg, section, key, raw, f"--set {item}")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .harness.data import SceneConfig, generate_dataset
    cfg = config_mod.load(args.config).scene if args.config else SceneConfig()
    for attr in ("size", "max_objects", "atten_r", "atten_g", "atten_b", "blur_sigma", "haze", "noise_sigma"):
        value = getattr(args, attr)
        if value is not None:
            setattr(cfg, attr, value)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    t0 = time.perf_counter()
    root = generate_dataset(args.out, args.count, args.seed, cfg, threads=args.threads)
    print(f"wrote {args.count} scenes to {root} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness.train import DivergenceError, load_split, train
    cfg = resolve_config(args)
    if not cfg.data.path:
        raise UsageError("no dataset: pass --data or set [data] path")
    train_scenes, val_scenes = load_split(cfg)
    try:
        records = train(cfg, train_scenes, val_scenes, out_dir=args.out)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    last = records[-1] if records else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.train_loss:.4f} mask_iou {last.mask_iou:.4f} "
              f"boundary_f {last.boundary_f:.4f}")
    print(f"run directory: {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .bkt import load_checkpoint
    from .harness.train import build_model, evaluate_model, load_split
    ckpt = Path(args.checkpoint)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    cfg = config_mod.from_dict(manifest["meta"]["config"], str(ckpt / "manifest.json"))
    if args.data:
        cfg.data.path = args.data
    if not cfg.data.path:
        raise UsageError("no dataset: pass --data")
    _, val_scenes = load_split(cfg)
    model = build_model(cfg)
    model.load_state_dict(load_checkpoint(ckpt))
    scores = evaluate_model(model, val_scenes, cfg)
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    results = gradsuite.run_suite(args.module, seed=args.seed, n_seeds=args.seeds)
    print(gradsuite.format_report(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if not failed else EXIT_USAGE


def audit_rows(backbone: str, schemes, gamma: int, num_envs: int) -> list[era.ParamCount]:
    if backbone == "swin-b-ref":
        return [era.SWIN_B_REFERENCE[s] for s in schemes]
    if backbone != "toy":
        raise UsageError(f"unknown backbone {backbone!r}; expected toy or swin-b-ref")
    specs = describe_backbone(AUDIT_BACKBONE)
    settings = EraSettings(enabled=True, gamma=gamma, num_envs=num_envs)
    cfgs = [settings.for_width(w) for w in AUDIT_BACKBONE.widths]
    return [era.count_params(s, specs, cfgs) for s in schemes]


def cmd_param_audit(args) -> int:
    schemes = era.SCHEMES if args.scheme == "all" else (args.scheme,)
    rows = audit_rows(args.backbone, schemes, args.gamma, args.num_envs)
    print("scheme\ttrainable\ttotal\tfraction")
    for r in rows:
        print(f"{r.scheme}\t{r.trainable}\t{r.total}\t{100 * r.fraction:.2f}%")
    payload = {"backbone": args.backbone, "gamma": args.gamma, "num_envs": args.num_envs,
               "rows": [{"scheme": r.scheme, "trainable": r.trainable, "total": r.total,
                         "fraction": r.fraction} for r in rows]}
    if args.json:
        print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "param_audit.json").write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_run_flags(p):
    p.add_argument("--config", help="key = value config file (or .json)")
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--loss", choices=["ce_only", "ce_plus_bace"])
    p.add_argument("--bace-scale", type=int)
    p.add_argument("--bace-lambda", type=float)
    p.add_argument("--bace-pool", choices=["max", "avg"])
    p.add_argument("--freeze", choices=["none", "era"])
    p.add_argument("--era", action="store_true", help="insert adapters after every backbone stage")
    p.add_argument("--gamma", type=int)
    p.add_argument("--num-envs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="baris", description="Underwater instance segmentation toolkit on a numpy autodiff core.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic degraded-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="read the [scene] section from this file")
    g.add_argument("--size", type=int)
    g.add_argument("--max-objects", type=int)
    g.add_argument("--atten-r", type=_range, metavar="LO,HI")
    g.add_argument("--atten-g", type=_range, metavar="LO,HI")
    g.add_argument("--atten-b", type=_range, metavar="LO,HI")
    g.add_argument("--blur-sigma", type=_range, metavar="LO,HI")
    g.add_argument("--haze", type=_range, metavar="LO,HI")
    g.add_argument("--noise-sigma", type=_range, metavar="LO,HI")
    g.add_argument("--threads", type=int, help="worker threads (default: BARIS_THREADS or 1)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a gen-data dataset")
    t.add_argument("--out", required=True, help="run directory")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on its validation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("grad-check", help="finite-difference audit of every differentiable op")
    c.add_argument("--module", choices=["all", *gradsuite.MODULES], default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=20, help="random draws per check")
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("param-audit", help="trainable-parameter accounting per tuning scheme")
    a.add_argument("--backbone", default="toy", help="toy or swin-b-ref")
    a.add_argument("--scheme", choices=["all", *era.SCHEMES], default="all")
    a.add_argument("--gamma", type=int, default=2)
    a.add_argument("--num-envs", type=int, default=16)
    a.add_argument("--json", action="store_true", help="also print the table as JSON")
    a.add_argument("--out", help="write param_audit.json here")
    a.set_defaults(func=cmd_param_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"baris {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
