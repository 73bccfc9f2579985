"""``splat-tr`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..scene import SceneFormatError, load_scene
from ..trustregion import family_slices, shd_radii
from . import report
from .checks import CHECKS
from .config import ConfigError, build_config, parse_overrides
from .dataset import DatasetConfig, generate, load_dataset
from .single import SingleFitConfig, fit_single, gt_primitive, views_for
from .training import NumericalFailure, evaluate_checkpoint, read_metrics, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splat-tr", description="Gaussian splat fitting with Hellinger trust regions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("generate", "write a synthetic dataset"), ("train", "run one optimizer"),
                        ("benchmark", "compare 3dgs2tr, adam and adam-tr on one dataset"),
                        ("fit-single", "single-Gaussian perturbation experiment")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None)
    ev = sub.add_parser("eval", help="held-out PSNR/SSIM of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", default=None, help="optional CSV path")
    ev.add_argument("--workers", type=int, default=1)
    rd = sub.add_parser("radii", help="per-family trust-region radius histograms as CSV")
    rd.add_argument("--scene", required=True)
    rd.add_argument("--eps", type=float, default=1e-6)
    rd.add_argument("--bins", type=int, default=20)
    rd.add_argument("--out", default="radii.csv")
    ck = sub.add_parser("check", help="numerical self-checks")
    ck.add_argument("name", choices=[*CHECKS, "all"])
    ck.add_argument("--seed", type=int, default=0)
    return p


def _dataset_config(cfg) -> DatasetConfig:
    return DatasetConfig(k_gt=cfg.k_gt, k_init=cfg.k_init, num_views=cfg.num_views,
                         holdout_every=cfg.holdout_every, width=cfg.width, height=cfg.height,
                         sigma_init=cfg.sigma_init, seed=cfg.seed)


def cmd_generate(cfg) -> int:
    out = generate(cfg.out, _dataset_config(cfg))
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    if not cfg.dataset:
        raise ConfigError("train needs --dataset")
    out = train(cfg, load_dataset(cfg.dataset))
    m = read_metrics(out / "metrics.csv")
    print(f"{cfg.optimizer}: {int(m['iter'][-1])} iterations, held-out PSNR {m['psnr'][-1]:.3f} dB -> {out}")
    return EXIT_OK


def cmd_benchmark(cfg) -> int:
    """Train all three optimizers on one dataset, then write the PSNR curves and a comparison table."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(cfg.dataset) if cfg.dataset else out / "dataset"
    if not (data_dir / "train_cameras.txt").exists():
        generate(data_dir, _dataset_config(cfg))
    data = load_dataset(data_dir)
    curves = {}
    for kind in ("3dgs2tr", "adam", "adam-tr"):
        cfg.optimizer, run_cfg_out = kind, cfg.out
        cfg.out = str(out / kind)
        train(cfg, data)
        cfg.out = run_cfg_out
        m = read_metrics(out / kind / "metrics.csv")
        curves[kind] = (m["iter"], m["psnr"])
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "iter", "psnr"])
        for kind, (it, p) in curves.items():
            for i, v in zip(it, p):
                w.writerow([kind, int(i), repr(float(v))])
    rows = comparison_rows(curves, cfg.iterations)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["claim", "iter", "lhs", "lhs_psnr", "rhs", "rhs_psnr", "holds"])
        for r in rows:
            w.writerow(r)
            print(f"{r[0]} at {r[1]}: {r[2]} {r[3]:.3f} dB vs {r[4]} {r[5]:.3f} dB -> {'holds' if r[6] else 'fails'}")
    report.plot_psnr_curves(curves, out / "psnr_curves.png", marks=(cfg.iterations // 2, cfg.iterations))
    return EXIT_OK


def psnr_at(curves, kind, it) -> float:
    its, p = curves[kind]
    idx = np.flatnonzero(its == it)
    if idx.size == 0:
        raise ValueError(f"no {kind} evaluation at iteration {it}")
    return float(p[idx[0]])


def comparison_rows(curves, total: int):
    half = total // 2
    a = psnr_at(curves, "3dgs2tr", half), psnr_at(curves, "adam", half)
    b = psnr_at(curves, "adam-tr", total), psnr_at(curves, "adam", total)
    return [("3dgs2tr>=adam", half, "3dgs2tr", a[0], "adam", a[1], a[0] >= a[1]),
            ("adam-tr>=adam", total, "adam-tr", b[0], "adam", b[1], b[0] >= b[1])]


def cmd_fit_single(cfg, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    trajs = fit_single(cfg)
    report.write_single_csv(trajs, out / "fit_single.csv")
    report.plot_motion(trajs, out / "hellinger_motion.png")
    gt = gt_primitive()
    report.plot_frame_strip(trajs, gt, views_for(gt, cfg)[0], out / "trajectory.png")
    for kind, tr in trajs.items():
        pm = max(m["param_max"] for m in tr.motion) if tr.motion else 0.0
        print(f"{kind}: final PSNR {tr.psnr[-1]:.2f} dB, max per-step H2/detS {pm:.3e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = load_dataset(args.dataset)
    per_view, p, s = evaluate_checkpoint(load_scene(args.checkpoint), data, args.out, args.workers)
    for cam, (pv, sv) in zip(data.test, per_view):
        print(f"{cam.image_name}: PSNR {pv:.3f} dB, SSIM {sv:.4f}")
    print(f"mean: PSNR {p:.3f} dB, SSIM {s:.4f}")
    return EXIT_OK


def radius_histograms(scene, eps: float, bins: int = 20):
    """Rows ``(family, lo, hi, count)`` with log-spaced bins per family."""
    eta = shd_radii(scene, eps)
    rows = []
    for fam, sl in family_slices(scene.num_splats).items():
        vals = np.log10(eta[sl])
        edges = np.linspace(vals.min(), vals.max() + 1e-12, bins + 1) if vals.size else np.zeros(bins + 1)
        counts, _ = np.histogram(vals, edges)
        rows += [(fam, 10.0 ** lo, 10.0 ** hi, int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return rows


def cmd_radii(args) -> int:
    if args.eps <= 0 or args.bins < 1:
        raise UsageError("need --eps > 0 and --bins >= 1")
    rows = radius_histograms(load_scene(args.scene), args.eps, args.bins)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "lo", "hi", "count"])
        w.writerows((f, repr(float(lo)), repr(float(hi)), c) for f, lo, hi, c in rows)
    print(f"radius histograms written to {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    names = list(CHECKS) if args.name == "all" else [args.name]
    ok = True
    for n in names:
        res = CHECKS[n](seed=args.seed)
        print(res.line())
        ok &= res.passed
    return EXIT_OK if ok else EXIT_CHECK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = _parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.command == "eval":
            if rest:
                raise UsageError(f"unexpected arguments {rest}")
            return cmd_eval(args)
        if args.command in ("check", "radii"):
            if rest:
                raise UsageError(f"unexpected arguments {rest}")
            return cmd_check(args) if args.command == "check" else cmd_radii(args)
        overrides = parse_overrides(rest)
        if args.command == "fit-single":
            out = Path(overrides.pop("out", "fit_single"))
            return cmd_fit_single(build_config(args.config, overrides, cls=SingleFitConfig), out)
        cfg = build_config(args.config, overrides)
        return {"generate": cmd_generate, "train": cmd_train, "benchmark": cmd_benchmark}[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"splat-tr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, SceneFormatError, OSError) as exc:
        print(f"splat-tr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"splat-tr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
