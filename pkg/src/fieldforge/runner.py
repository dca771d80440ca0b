"""Turn an :class:`ExperimentConfig` into task runs and artifacts."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ExperimentConfig
from .domain import DomainBounds
from .extract import Contour2D, ExtractionConfig, extract
from .fields import build_field
from .geometry import (GeometryError, OrientedPointCloud, load_mesh, load_points, make_oracle, sample_shape,
                       save_obj, toy_shape)
from .pnm import read_pnm, write_pnm
from .precond import AlphaGrid, noise_rng
from .tasks import TaskResult, fit_image, fit_sdf_direct, fit_sdf_points

_CLOUD = 3


def procedural_image(name: str, size: int = 64) -> np.ndarray:
    """Built-in targets: ``half_flat`` (flat left half, textured right half),
    ``constant`` and the 1D ``signal1d``."""
    if name == "constant":
        return np.full((size, size), 0.5)
    if name == "half_flat":
        y, x = np.mgrid[0:size, 0:size] + 0.5
        texture = 0.5 + 0.4 * np.sin(2 * np.pi * x * 6 / size) * np.sin(2 * np.pi * y * 6 / size)
        return np.where(x < size / 2, 0.5, texture)
    if name == "signal1d":
        return signal_1d((np.arange(size) + 0.5) / size)
    raise ConfigError(f"task.image: unknown procedural image {name!r}")


def signal_1d(x: np.ndarray) -> np.ndarray:
    """Step edges plus a chirp-like ripple, values in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    steps = np.where((x > 0.2) & (x < 0.45), 0.8, 0.2) + np.where(x > 0.7, 0.3, 0.0)
    ripple = 0.12 * np.sin(2 * np.pi * 24 * x) * (x > 0.5)
    return np.clip(steps + ripple, 0.0, 1.0)


def load_image_target(cfg: ExperimentConfig) -> np.ndarray:
    src = cfg.task.image
    if src.lower().endswith((".pgm", ".ppm")):
        try:
            return read_pnm(src)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"task.image: {exc}") from None
    return procedural_image(src, cfg.task.image_size)


def geometry_sources(cfg: ExperimentConfig, shape_name: str | None = None):
    """``(reference shape or None, oriented cloud)`` for SDF tasks.

    Files are normalized to the unit box together (5% margin).
    """
    t = cfg.task
    try:
        if t.mesh or t.points:
            ref = load_mesh(t.mesh) if t.mesh else None
            if ref is not None:
                ref, (offset, scale) = ref.normalized()
            if t.points:
                cloud = load_points(t.points)
                if ref is not None:
                    cloud = OrientedPointCloud((cloud.points - offset) * scale, cloud.normals)
                else:
                    lo, hi = cloud.points.min(0), cloud.points.max(0)
                    scale = 0.9 / float((hi - lo).max())
                    cloud = OrientedPointCloud((cloud.points - 0.5 * (lo + hi)) * scale + 0.5, cloud.normals)
            else:
                cloud = sample_shape(ref, cfg.sdf_points.cloud_points, noise_rng(t.cloud_seed, _CLOUD))
            return ref, cloud
        shape = toy_shape(shape_name or t.shape)
    except (OSError, GeometryError) as exc:
        raise ConfigError(f"task geometry: {exc}") from None
    cloud = sample_shape(shape, cfg.sdf_points.cloud_points, noise_rng(t.cloud_seed, _CLOUD))
    return shape, cloud


def _shape_dim(shape) -> int:
    return 2 if hasattr(shape, "signed_area") else 3


def prepared(cfg: ExperimentConfig, shape_name: str | None = None) -> ExperimentConfig:
    """Copy of ``cfg`` with field dimensions matched to the task data."""
    cfg = copy.deepcopy(cfg)
    if cfg.task.kind == "image":
        target = load_image_target(cfg)
        cfg.field.input_dim = 1 if target.ndim == 1 else 2
        cfg.field.output_dim = 1 if target.ndim < 3 else target.shape[2]
    else:
        if cfg.task.mesh or cfg.task.points:
            cfg.field.input_dim = 3
        else:
            cfg.field.input_dim = _shape_dim(toy_shape(shape_name or cfg.task.shape))
        cfg.field.output_dim = 1
    return cfg


def run_task(cfg: ExperimentConfig, seed: int | None = None, shape_name: str | None = None) -> TaskResult:
    seed = cfg.seed if seed is None else seed
    cfg = prepared(cfg, shape_name)
    kind = cfg.task.kind
    if kind == "image":
        target = load_image_target(cfg)
        res = fit_image(target, cfg.field, cfg.image, cfg.optim, cfg.precond, seed)
        res.extra["target"] = target
        return res
    ref, cloud = geometry_sources(cfg, shape_name)
    if kind == "sdf_points":
        return fit_sdf_points(cloud, cfg.field, cfg.sdf_points, cfg.optim, cfg.precond, seed, ref, cfg.eval)
    if ref is None:
        raise ConfigError("task.mesh (or a toy task.shape) is required for sdf_direct")
    return fit_sdf_direct(make_oracle(ref), ref, cfg.field, cfg.sdf_direct, cfg.optim, cfg.precond, seed, cfg.eval)


def quality_of(result: TaskResult, cfg: ExperimentConfig) -> float:
    return float(result.report.metrics[cfg.task.quality])


def lower_is_better(cfg: ExperimentConfig) -> bool:
    return cfg.task.quality != "psnr"


def is_success(quality: float, cfg: ExperimentConfig) -> bool:
    thr = cfg.task.success_threshold
    if thr is None or not math.isfinite(quality):
        return thr is None and math.isfinite(quality)
    return quality <= thr if lower_is_better(cfg) else quality >= thr


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_csv(path, header, rows, cfg_hash: str, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        fh.write(f"# config_hash={cfg_hash} seed={seed}\n")


def write_run_artifacts(result: TaskResult, cfg: ExperimentConfig, out: Path, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = result.report
    report.write_csv(out / "report.csv")
    dc.save_checkpoint(result.params, out / "checkpoint.ffld")
    metrics = sorted(report.metrics.items())
    write_csv(out / "metrics.csv", [k for k, _ in metrics], [[v for _, v in metrics]], report.config_hash, seed)
    if cfg.task.kind == "image":
        recon = np.clip(result.extra["reconstruction"], 0.0, 1.0)
        if recon.ndim == 1:
            recon = recon[None, :]
        write_pnm(out / ("reconstruction.ppm" if recon.ndim == 3 else "reconstruction.pgm"), recon)
    else:
        write_surface(result.field, cfg, out)
    if result.alpha_map is not None:
        write_alpha_map(result.alpha_map, out, report.config_hash, seed)


def write_surface(field_, cfg: ExperimentConfig, out: Path):
    ev = cfg.eval
    surface = extract(field_, ExtractionConfig(ev.extraction_resolution, 0.0, ev.extraction_mode, ev.bisection_steps),
                      field_.domain)
    if isinstance(surface, Contour2D):
        surface.save_csv(out / "contour.csv")
    else:
        save_obj(surface, out / "surface.obj")
    return surface


def write_alpha_map(alpha: np.ndarray, out: Path, cfg_hash: str, seed: int) -> None:
    """Min-max normalized image (2D) or raw f32 volume with a text header (3D), plus stats."""
    lo, hi = float(alpha.min()), float(alpha.max())
    span = hi - lo
    norm = np.zeros_like(alpha) if span == 0 else (alpha - lo) / span
    if alpha.ndim == 1:
        write_pnm(out / "alpha_map.pgm", norm[None, :])
    elif alpha.ndim == 2:
        write_pnm(out / "alpha_map.pgm", norm)
    else:
        alpha.astype("<f4").tofile(out / "alpha_map.f32")
        shape = " ".join(str(s) for s in alpha.shape)
        (out / "alpha_map.txt").write_text(f"f32 little-endian\nshape {shape}\norder C\n")
    write_csv(out / "alpha_stats.csv", ["min", "max", "mean", "std"],
              [[lo, hi, float(alpha.mean()), float(alpha.std())]], cfg_hash, seed)


def rebuild(cfg: ExperimentConfig, checkpoint, shape_name: str | None = None,
            require_alpha: bool = False):
    """Field (and alpha grid when present) restored from a checkpoint."""
    cfg = prepared(cfg, shape_name)
    try:
        blocks = dc.load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"checkpoint: {exc}") from None
    if require_alpha and AlphaGrid.block not in blocks:
        raise ConfigError(f"checkpoint has no alpha_grid block: {checkpoint}")
    params = dc.ParamStore()
    domain = DomainBounds.unit(cfg.field.input_dim)
    field_ = build_field(cfg.field, params, domain)
    grid = None
    if AlphaGrid.block in blocks:
        grid = AlphaGrid(params, domain, cfg.precond.grid_resolution, 0.0, cfg.precond.grid_mode)
    try:
        dc.restore_checkpoint(params, blocks)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match the config: {exc}") from None
    return field_, grid
