"""Command line interface: ``ddip <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import operators as ops
from .config import all_keys, dump_config, load_config, set_value
from .metrics import volume_metrics

log = logging.getLogger("ddip")


def _add_common(p: argparse.ArgumentParser, config_flags: bool = True) -> None:
    p.add_argument("--config", help="INI file with experiment settings")
    p.add_argument("--seed", type=int, help="phantom/measurement seed")
    p.add_argument("--out", help="output directory or file")
    if config_flags:
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
        for key, _ in all_keys():
            section, name = key.split(".")
            flag = f"--{name}" if section == "experiment" else f"--{section}.{name}"
            if flag in ("--seed", "--out_dir"):
                continue
            p.add_argument(flag, dest=f"cfg:{key}", metavar="V", help=argparse.SUPPRESS)


def _build_config(args) -> ex.ExperimentConfig:
    task = getattr(args, "cfg:experiment.task", None) or "ct3d"
    cfg = load_config(args.config) if args.config else ex.for_task(task)
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            cfg = set_value(cfg, name[4:], value)
    for item in getattr(args, "set", []):
        key, _, value = item.partition("=")
        cfg = set_value(cfg, key.strip(), value)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_phantom(args) -> int:
    cfg = _build_config(args)
    gt = ex.make_ground_truth(cfg)
    out = Path(args.out or "phantom")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "volume.npy", gt)
    for i, img in enumerate(ex.magnitude(gt)):
        ex.save_png16(out / f"slice_{i:03d}.png", img)
        img.astype("<f4").tofile(out / f"slice_{i:03d}.raw")
    print(f"wrote {len(gt)} slices to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out or f"prior-{cfg.train.key()}.npz")
    _, trace = ex.train_prior(cfg.train, out)
    print(f"trained {cfg.train.steps} steps, final loss {np.mean(trace[-50:]):.5f}; wrote {out}")
    return 0


def cmd_measure(args) -> int:
    cfg = _build_config(args)
    gt = ex.make_ground_truth(cfg)
    spec = ex.build_operator(cfg)
    y = ops.simulate_measurement(spec, gt, [cfg.seed, 1])
    out = Path(args.out or "measurement")
    out.mkdir(parents=True, exist_ok=True)
    ops.write_measurement(out / "y", y, spec, seed=cfg.seed)
    np.save(out / "truth.npy", gt)
    print(f"wrote measurement {y.shape} and ground truth to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _build_config(args)
    out = args.out or f"runs/{cfg.method}"
    if args.measurement:
        y, meta = ops.read_measurement(args.measurement)
        spec = ops.spec_from_meta(meta, args.measurement)
        prior = ex.load_prior(cfg) if cfg.method in ex.DIFFUSION else None
        rec = ex.reconstruct(cfg, y, spec, prior)
        o = Path(out)
        o.mkdir(parents=True, exist_ok=True)
        np.save(o / "reconstruction.npy", rec.X0)
        for i, img in enumerate(ex.magnitude(rec.X0)):
            ex.save_png16(o / f"slice_{i:03d}.png", img)
            img.astype("<f4").tofile(o / f"slice_{i:03d}.raw")
        print(f"reconstructed {len(rec.X0)} slices with {cfg.method}; wrote {o}")
        return 0
    report = ex.run_experiment(replace(cfg, out_dir=out))
    np.save(Path(out) / "reconstruction.npy", report.reconstruction)
    print(f"{cfg.method}: PSNR {report.psnr:.2f} dB  SSIM {report.ssim:.4f}  "
          f"adapt steps {report.adapt_steps}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    rec = np.load(args.reconstruction)
    ref = np.load(args.truth)
    if rec.ndim == 4:
        rec, ref = ex.magnitude(rec), ex.magnitude(ref)
    rows = volume_metrics(rec, ref)
    w = csv.writer(sys.stdout if not args.out else open(args.out, "w", newline=""),
                   lineterminator="\n")
    w.writerow(ex.CSV_HEADER)
    for i, (p, s) in enumerate(rows):
        w.writerow([args.volume, i, args.method, f"{p:.6f}", f"{s:.6f}", "", ""])
    print(f"mean PSNR {rows[:, 0].mean():.3f} dB, SSIM {rows[:, 1].mean():.4f}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    base = _build_config(args)
    configs, labels = [], []
    methods = args.methods.split(",") if args.methods else [base.method]
    values = args.values.split(",") if args.param else [None]
    for m in methods:
        for v in values:
            c = replace(base, method=m.strip())
            label = m.strip()
            if v is not None:
                c = set_value(c, args.param, v.strip())
                label = f"{label} {args.param}={v.strip()}"
            configs.append(c)
            labels.append(label)
    rows = ex.compare_methods(configs, labels)
    text = ex.comparison_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .audit import run_audit

    entries = run_audit(seed=args.seed or 0)
    worst = 0.0
    for e in entries:
        status = "ok" if e.max_rel_error < args.tol else "FAIL"
        print(f"{e.name:18s} {e.max_rel_error:.2e}  checked={e.checked:3d} "
              f"kinks={e.excluded:2d}  {status}")
        worst = max(worst, e.max_rel_error)
    print(f"worst relative error {worst:.2e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 1


def cmd_config(args) -> int:
    cfg = _build_config(args)
    text = dump_config(cfg)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate an OOD ground-truth volume")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the ellipse prior (denoising score matching)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("measure", help="simulate measurements of the OOD volume")
    _add_common(p)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("reconstruct", help="run one reconstruction method")
    _add_common(p)
    p.add_argument("--measurement", help="measurement prefix written by 'measure' (…/y)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR/SSIM of a saved reconstruction")
    _add_common(p, config_flags=False)
    p.add_argument("reconstruction", help=".npy reconstruction")
    p.add_argument("truth", help=".npy ground truth")
    p.add_argument("--method", default="unknown")
    p.add_argument("--volume", default="vol0")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="compare methods or a parameter sweep")
    _add_common(p)
    p.add_argument("--methods", help="comma-separated methods")
    p.add_argument("--param", help="section.key to sweep, e.g. adapt.K")
    p.add_argument("--values", help="comma-separated values for --param")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="audit analytic gradients against finite differences")
    _add_common(p, config_flags=False)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="print the effective configuration as INI")
    _add_common(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.StageError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
