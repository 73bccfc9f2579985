"""Training and evaluation loops with CSV logging and checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import optimizer as opt
from .. import renderer
from ..residuals import mean_ssim, psnr
from ..scene import Scene, save_image, save_scene
from ..trustregion import RadiusCaps
from .config import RunConfig, dump_config
from .dataset import Dataset

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss", "psnr", "ssim", "gnorm", "step_pre", "step_post", "clip_frac", "eps", "seconds"]
SENTINEL = -1.0


class NumericalFailure(FloatingPointError):
    """Training produced a non-finite loss or update."""


def optimizer_config(cfg: RunConfig, extent: float) -> opt.OptimizerConfig:
    return opt.OptimizerConfig(
        kind=cfg.optimizer, lam=cfg.lam, batch_grad=cfg.batch_grad, batch_hutch=cfg.batch_hutch, nu=cfg.nu,
        interval=cfg.interval, theta1=cfg.theta1, theta2=cfg.theta2, eps_start=cfg.eps_start,
        eps_end=cfg.eps_end, total_steps=cfg.iterations,
        caps=RadiusCaps(cfg.cap_mean, cfg.cap_scale, cfg.cap_rotation, cfg.cap_opacity, cfg.cap_color),
        lr_position=cfg.lr_position, lr_position_final=cfg.lr_position_final, scene_extent=extent,
        lr_scale=cfg.lr_scale, lr_rotation=cfg.lr_rotation, lr_opacity=cfg.lr_opacity, lr_color=cfg.lr_color,
    )


def evaluate(scene: Scene, views, workers: int = 1) -> tuple[list[tuple[float, float]], float, float]:
    """Per-view ``(psnr, ssim)`` plus their means."""
    views = list(views)
    if not views:
        raise ValueError("no held-out views to evaluate")

    def one(cam):
        img = renderer.rasterize(scene, cam).image
        return psnr(img, cam.image), mean_ssim(img, cam.image)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_view = list(pool.map(one, views))
    else:
        per_view = [one(c) for c in views]
    return per_view, float(np.mean([p for p, _ in per_view])), float(np.mean([s for _, s in per_view]))


def _fmt(v) -> str:
    return repr(float(v))


def train(cfg: RunConfig, data: Dataset) -> Path:
    """Run ``cfg.optimizer`` from the init scene; returns the output directory.

    Rows are logged at iteration 0, every ``eval_every`` steps and at the
    end. Baselines write the ``-1`` sentinel into the trust-region columns
    (ADAM) and ``seconds`` is ``-1`` unless ``log_wall_time`` is set, so
    metrics files compare bitwise across runs.
    """
    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "previews").mkdir(exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    oc = optimizer_config(cfg, data.extent)
    problem = opt.problem_for(data.train, oc)
    step = opt.make_step(oc)
    x = data.init.pack()
    state = opt.OptimizerState.create(x.size, cfg.seed)
    start = time.perf_counter()
    steps = cfg.steps

    with open(out / "metrics.csv", "w", newline="") as fh, open(out / "timing.csv", "w", newline="") as th:
        writer, timer = csv.writer(fh), csv.writer(th)
        writer.writerow(METRICS_HEADER)
        timer.writerow(["iter", "seconds"])

        def log_row(t, loss, diag):
            scene = Scene.unpack(x)
            _, p, s = evaluate(scene, data.test, cfg.workers)
            secs = time.perf_counter() - start
            d = diag or {}
            writer.writerow([t, _fmt(loss), _fmt(p), _fmt(s)] + [
                _fmt(d.get(k, SENTINEL)) for k in ("gnorm", "step_pre", "step_post", "clip_frac", "eps")
            ] + [_fmt(secs if cfg.log_wall_time else SENTINEL)])
            timer.writerow([t, f"{secs:.3f}"])
            fh.flush()
            log.info("iter %d loss %.6g psnr %.3f ssim %.4f", t, loss, p, s)

        log_row(0, problem.objective(x), None)
        save_scene(Scene.unpack(x), out / "checkpoints" / "last_good.ply")
        for t in range(1, steps + 1):
            try:
                x_new, diag = step(state, x, problem, oc)
            except (FloatingPointError, renderer.RenderError) as exc:
                raise NumericalFailure(f"iteration {t}: {exc}") from exc
            if not np.isfinite(diag["loss"]) or not np.all(np.isfinite(x_new)):
                raise NumericalFailure(f"iteration {t}: non-finite loss or parameters; "
                                       f"last good checkpoint kept in {out / 'checkpoints'}")
            x = x_new
            if t % cfg.checkpoint_every == 0 or t == steps:
                scene = Scene.unpack(x)
                save_scene(scene, out / "checkpoints" / f"iter_{t:06d}.ply")
                save_scene(scene, out / "checkpoints" / "last_good.ply")
            if t % cfg.preview_every == 0 or t == steps:
                cam = data.test[0] if data.test else data.train[0]
                save_image(out / "previews" / f"iter_{t:06d}.png", renderer.rasterize(Scene.unpack(x), cam).image)
            if t % cfg.eval_every == 0 or t == steps:
                log_row(t, diag["loss"], diag)
    return out


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = np.array(body, dtype=np.float64).T if body else np.empty((len(header), 0))
    return dict(zip(header, cols))


def evaluate_checkpoint(scene: Scene, data: Dataset, out_csv=None, workers: int = 1):
    per_view, p, s = evaluate(scene, data.test, workers)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim"])
            for cam, (pv, sv) in zip(data.test, per_view):
                w.writerow([cam.image_name, _fmt(pv), _fmt(sv)])
            w.writerow(["mean", _fmt(p), _fmt(s)])
    return per_view, p, s
