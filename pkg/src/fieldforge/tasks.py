"""Training tasks: image fitting, SDF from oriented points, direct SDF fitting."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .domain import DomainBounds
from .extract import Contour2D, ExtractionConfig, extract
from .fields import Field, FieldConfig, build_field, geometric_init, stencil_eval
from .geometry import OrientedPointCloud, chamfer, sample_segments, sample_shape, sample_surface
from .precond import AlphaGrid, Constant, ExpDecay, Preconditioner, Step, noise_rng

DIVERGENCE_LIMIT = 1e6
PSNR_CAP = 99.0

# rng stream purposes
_INIT, _BATCH, _CLOUD, _EVAL, _ALPHA_INIT = 1, 2, 3, 4, 5


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, report: "RunReport | None" = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass
class PrecondConfig:
    """Stochastic preconditioning settings.

    ``alpha0`` is absolute (domain units) or a fraction of the domain's
    bounding-box diagonal depending on ``alpha_units``. ``end_fraction`` is
    the share of training after which decaying schedules reach zero.
    """

    enabled: bool = False
    kernel: str = "gaussian"
    schedule: str = "step"  # constant | exp_decay | step
    alpha0: float = 0.02
    alpha_units: str = "diagonal"  # diagonal | absolute
    end_fraction: float = 0.2
    floor_ratio: float = 1e-3
    samples: int = 1
    adaptive: bool = False
    grid_resolution: int = 16
    alpha_lr: float = 1e-3
    grid_mode: str = "linear"

    def validate(self) -> None:
        if self.alpha0 < 0:
            raise ValueError("precond.alpha0 must be >= 0")
        if self.schedule not in ("constant", "exp_decay", "step"):
            raise ValueError("precond.schedule must be constant, exp_decay or step")
        if self.alpha_units not in ("diagonal", "absolute"):
            raise ValueError("precond.alpha_units must be diagonal or absolute")
        if not 0.0 <= self.end_fraction <= 1.0:
            raise ValueError("precond.end_fraction must lie in [0, 1]")
        if self.samples < 1:
            raise ValueError("precond.samples must be >= 1")
        if self.grid_resolution < 2:
            raise ValueError("precond.grid_resolution must be >= 2")

    def alpha_absolute(self, domain: DomainBounds) -> float:
        return self.alpha0 * (domain.diagonal if self.alpha_units == "diagonal" else 1.0)

    def build(self, domain: DomainBounds, steps: int, seed: int, params: dc.ParamStore) -> Preconditioner | None:
        """None when disabled, so the plain code path runs untouched."""
        self.validate()
        if not self.enabled:
            return None
        a0 = self.alpha_absolute(domain)
        if self.adaptive:
            grid = AlphaGrid(params, domain, self.grid_resolution, a0, self.grid_mode)
            return Preconditioner(domain, self.kernel, None, grid, seed, self.samples)
        end = int(round(self.end_fraction * steps))
        if self.schedule == "constant":
            schedule = Constant(a0)
        elif self.schedule == "exp_decay":
            schedule = ExpDecay(a0, end, self.floor_ratio)
        else:
            schedule = Step(a0, end)
        return Preconditioner(domain, self.kernel, schedule, None, seed, self.samples)


@dataclass
class OptimConfig:
    steps: int = 2000
    lr: float = 1e-3
    hash_lr: float = 1e-2
    grid_lr: float = 1e-2
    eval_every: int = 100

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("optim.steps must be >= 1")
        if min(self.lr, self.hash_lr, self.grid_lr) <= 0:
            raise ValueError("optim learning rates must be positive")
        if self.eval_every < 1:
            raise ValueError("optim.eval_every must be >= 1")


@dataclass
class EvalConfig:
    chamfer_samples: int = 100_000
    extraction_resolution: int = 128
    extraction_mode: str = "linear"
    bisection_steps: int = 8
    mape_samples: int = 20_000


@dataclass
class SdfPointsConfig:
    lambdas: list[float] = field(default_factory=lambda: [3e3, 1e2, 5.0, 1e2])
    n_surface: int = 512
    n_uniform: int = 512
    fd_step: float | None = None
    geometric_init: bool = True
    geometric_bias: float = 0.1
    offsurface_sharpness: float = 100.0
    cloud_points: int = 10_000

    def validate(self) -> None:
        if len(self.lambdas) != 4:
            raise ValueError("task.lambdas needs four weights (surface, normal, eikonal, offsurface)")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("task.lambdas: every lambda must be >= 0")
        if self.n_surface < 1 or self.n_uniform < 1:
            raise ValueError("task batch sizes n_surface and n_uniform must be >= 1")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ValueError("task.fd_step must be positive")


@dataclass
class DirectSdfConfig:
    mix: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.25])  # surface, near, uniform
    near_sigma: float = 0.01
    epsilon: float = 1e-2
    batch: int = 1024
    cloud_points: int = 20_000

    def validate(self) -> None:
        if len(self.mix) != 3 or any(m < 0 for m in self.mix) or abs(sum(self.mix) - 1.0) > 1e-9:
            raise ValueError("task.mix must be three non-negative weights summing to 1")
        if self.epsilon <= 0:
            raise ValueError("task.epsilon must be positive")
        if self.batch < 1:
            raise ValueError("task.batch must be >= 1")


@dataclass
class ImageFitConfig:
    batch: int = 4096  # 0 means every pixel each step

    def validate(self) -> None:
        if self.batch < 0:
            raise ValueError("task.batch must be >= 0")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(*parts) -> str:
    """sha256 of canonical JSON (sorted keys), stable under field reordering."""
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("step", "loss", "alpha", "psnr", "chamfer")


@dataclass
class RunReport:
    seed: int
    config_hash: str
    losses: list[float] = field(default_factory=list)
    alpha_trace: list[float] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    sp_wall_time: float = 0.0
    status: str = "ok"

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in CSV_COLUMNS])
        buf.write(f"# config_hash={self.config_hash} seed={self.seed}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


@dataclass
class TaskResult:
    field: Field
    params: dc.ParamStore
    report: RunReport
    preconditioner: Preconditioner | None = None
    extra: dict = field(default_factory=dict)

    @property
    def alpha_map(self) -> np.ndarray | None:
        if self.preconditioner is None or not self.preconditioner.adaptive:
            return None
        return np.maximum(self.preconditioner.alpha_grid.values(), 0.0)


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def loss_mape(pred, d, epsilon: float = 1e-2):
    """Mean ``|pred - d| / (|d| + eps)``; ``pred`` may be a node or an array."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    d = np.asarray(d, dtype=np.float64).reshape(-1, 1)
    w = 1.0 / (np.abs(d) + epsilon)
    if isinstance(pred, dc.Node):
        return dc.mean(dc.abs(dc.reshape(pred, (-1, 1)) - d) * w)
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64).reshape(-1, 1) - d) * w))


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def sdf_point_terms(values, grads, normals, n_surface: int, sharpness: float):
    """The four SDF-from-points loss terms from stencil outputs.

    ``values`` (N, 1) and ``grads`` (N, 1, m) stack the surface batch
    (first ``n_surface`` rows) over the uniform batch.
    """
    m = grads.shape[-1]
    g = dc.reshape(grads, (grads.shape[0], m))
    vs, vu = values[:n_surface], values[n_surface:]
    gs, gu = g[:n_surface], g[n_surface:]
    l_surface = dc.mean(dc.abs(vs))
    # cosine form: the raw inner product is unbounded below in |grad f|
    gs_norm = dc.sqrt(dc.sum(dc.square(gs), axis=1) + 1e-12)
    l_normal = dc.mean(1.0 - dc.sum(gs * normals, axis=1) / gs_norm)
    norm = dc.sqrt(dc.sum(dc.square(gu), axis=1) + 1e-12)
    l_eik = dc.mean(dc.abs(norm - 1.0))
    l_off = dc.mean(dc.exp(dc.abs(vu) * (-sharpness)))
    return l_surface, l_normal, l_eik, l_off


def loss_sdf_points(field_: Field, tape: dc.Tape, surface: OrientedPointCloud, uniform: np.ndarray,
                    config: SdfPointsConfig, precond: Preconditioner | None = None, step: int = 0,
                    terms_out: dict | None = None) -> dc.Node:
    """Weighted SDF-from-points objective.

    Surface and uniform points share one batched stencil; under
    preconditioning each point gets one offset shared by its center value
    and its whole gradient stencil.
    """
    x = np.concatenate([surface.points, uniform], axis=0)
    if precond is None:
        values, grads = stencil_eval(field_, tape, x, config.fd_step)
    else:
        values, grads = precond.stencil(field_, tape, x, step, config.fd_step)
    terms = sdf_point_terms(values, grads, surface.normals, len(surface), config.offsurface_sharpness)
    if terms_out is not None:
        terms_out.update(zip(("surface", "normal", "eikonal", "offsurface"), (float(t.value) for t in terms)))
    total = None
    for lam, term in zip(config.lambdas, terms):
        part = term * float(lam)
        total = part if total is None else total + part
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _adam_for(params: dc.ParamStore, optim: OptimConfig, precond_cfg: PrecondConfig, prefix="field"):
    block_lr = {f"{prefix}.hash": optim.hash_lr, f"{prefix}.grid": optim.grid_lr,
                AlphaGrid.block: precond_cfg.alpha_lr}
    return dc.AdamState(len(params), lr=optim.lr, block_lr=block_lr)


def _train(params, adam, steps: int, loss_fn: Callable[[dc.Tape, int], dc.Node], precond, report: RunReport,
           eval_every: int, row_metrics: Callable[[int], dict] | None = None):
    t_start = time.perf_counter()
    for step in range(steps):
        t0 = time.perf_counter()
        tape = dc.Tape(params)
        out = loss_fn(tape, step)
        loss = float(np.asarray(out.value).reshape(()))
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            report.status = "diverged"
            report.wall_time = time.perf_counter() - t_start
            raise DivergenceError(f"loss {loss!r} at step {step} (limit {DIVERGENCE_LIMIT:g})", report)
        tape.backward(out)
        alpha = precond.alpha(step) if precond is not None else 0.0
        dc.adam_step(params, adam)
        dt = time.perf_counter() - t0
        if precond is not None and precond.active(step):
            report.sp_wall_time += dt
        report.losses.append(loss)
        report.alpha_trace.append(alpha)
        if (step + 1) % eval_every == 0 or step == steps - 1:
            row = {"step": step + 1, "loss": loss, "alpha": alpha, "psnr": None, "chamfer": None}
            if row_metrics is not None:
                row.update(row_metrics(step))
            report.rows.append(row)
    report.wall_time = time.perf_counter() - t_start


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(_INIT,))))


# ---------------------------------------------------------------------------
# image fitting
# ---------------------------------------------------------------------------


def pixel_coords(shape) -> np.ndarray:
    """Pixel-center coordinates in [0, 1]^m; axis 0 is the image column (x)."""
    if len(shape) == 1:
        return ((np.arange(shape[0]) + 0.5) / shape[0])[:, None]
    h, w = shape[:2]
    col, row = np.meshgrid((np.arange(w) + 0.5) / w, (np.arange(h) + 0.5) / h, indexing="xy")
    return np.stack([col.ravel(), row.ravel()], axis=-1)


def _image_values(target: np.ndarray) -> np.ndarray:
    if target.ndim == 1:
        return target[:, None]
    if target.ndim == 2:
        return target.reshape(-1, 1)
    return target.reshape(-1, target.shape[2])


def fit_image(target: np.ndarray, field_config: FieldConfig, task: ImageFitConfig | None = None,
              optim: OptimConfig | None = None, precond_config: PrecondConfig | None = None,
              seed: int = 0) -> TaskResult:
    """Fit a 1D signal or 2D image (values in [0, 1]) with an L2 loss.

    Coordinates are pixel centers; under preconditioning every query is
    perturbed (scheduled alpha or a trainable alpha grid).
    """
    task = task or ImageFitConfig()
    optim = optim or OptimConfig()
    precond_config = precond_config or PrecondConfig()
    task.validate()
    optim.validate()
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("target image is empty")
    dim = 1 if target.ndim == 1 else 2
    if field_config.input_dim != dim:
        raise ValueError(f"field.input_dim must be {dim} for this target")
    values = _image_values(target)
    if field_config.output_dim != values.shape[1]:
        raise ValueError(f"field.output_dim must be {values.shape[1]} for this target")
    coords = pixel_coords(target.shape)
    domain = DomainBounds.unit(dim)

    params = dc.ParamStore()
    field_ = build_field(field_config, params, domain, rng=_init_rng(seed))
    precond = precond_config.build(domain, optim.steps, seed, params)
    adam = _adam_for(params, optim, precond_config)
    report = RunReport(seed, config_hash("image", task, field_config, optim, precond_config, list(target.shape)))
    n_pix = len(coords)

    def loss_fn(tape, step):
        if task.batch == 0 or task.batch >= n_pix:
            idx = slice(None)
        else:
            idx = noise_rng(seed, _BATCH, step).integers(0, n_pix, task.batch)
        x, y = coords[idx], values[idx]
        pred = field_.query(tape, x) if precond is None else precond.query(field_, tape, x, step)
        return dc.mean(dc.square(pred - y))

    def row_metrics(step):
        return {"psnr": psnr(np.clip(field_(coords), 0.0, 1.0), values)}

    _train(params, adam, optim.steps, loss_fn, precond, report, optim.eval_every, row_metrics)
    recon = field_(coords)
    report.metrics["psnr"] = psnr(np.clip(recon, 0.0, 1.0), values)
    result = TaskResult(field_, params, report, precond)
    result.extra["reconstruction"] = recon.reshape(target.shape)
    return result


# ---------------------------------------------------------------------------
# SDF from oriented points
# ---------------------------------------------------------------------------


def sample_level_set(surface, count: int, rng: np.random.Generator) -> np.ndarray | None:
    if isinstance(surface, Contour2D):
        segs = surface.segment_points
        if not len(segs) or np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1).sum() == 0:
            return None
        return sample_segments(segs, count, rng).points
    if not len(surface.faces) or surface.face_areas.sum() == 0:
        return None
    return sample_surface(surface.drop_degenerate(0.0), count, rng).points


def surface_chamfer(field_: Field, reference, eval_cfg: EvalConfig, seed: int) -> float:
    """Chamfer between the extracted zero level set and the reference shape.

    Both sides are sampled with ``chamfer_samples`` points from a pinned
    rng stream; an empty extraction scores ``inf``.
    """
    cfg = ExtractionConfig(eval_cfg.extraction_resolution, 0.0, eval_cfg.extraction_mode, eval_cfg.bisection_steps)
    surface = extract(field_, cfg, field_.domain)
    pred = sample_level_set(surface, eval_cfg.chamfer_samples, noise_rng(seed, _EVAL, 0))
    if pred is None:
        return math.inf
    ref = sample_shape(reference, eval_cfg.chamfer_samples, noise_rng(seed, _EVAL, 1)).points
    return chamfer(pred, ref)


def fit_sdf_points(cloud: OrientedPointCloud, field_config: FieldConfig, task: SdfPointsConfig | None = None,
                   optim: OptimConfig | None = None, precond_config: PrecondConfig | None = None,
                   seed: int = 0, reference=None, eval_cfg: EvalConfig | None = None,
                   domain: DomainBounds | None = None) -> TaskResult:
    """Fit an SDF to an oriented point cloud with the four-term objective.

    Each step draws ``n_surface`` cloud points and ``n_uniform`` uniform
    domain points. With ``reference`` (a Polygon2D or TriMesh) the final
    report carries the Chamfer distance of the extracted level set.
    """
    task = task or SdfPointsConfig()
    optim = optim or OptimConfig()
    precond_config = precond_config or PrecondConfig()
    eval_cfg = eval_cfg or EvalConfig()
    task.validate()
    optim.validate()
    if cloud.dim != field_config.input_dim:
        raise ValueError("point cloud dimension does not match field.input_dim")
    domain = domain or DomainBounds.unit(cloud.dim)

    params = dc.ParamStore()
    field_ = build_field(field_config, params, domain, rng=_init_rng(seed))
    if task.geometric_init:
        geometric_init(field_, task.geometric_bias, _init_rng(seed))
    precond = precond_config.build(domain, optim.steps, seed, params)
    adam = _adam_for(params, optim, precond_config)
    report = RunReport(seed, config_hash("sdf_points", task, field_config, optim, precond_config, eval_cfg))
    n = len(cloud)

    def loss_fn(tape, step):
        rng = noise_rng(seed, _BATCH, step)
        idx = rng.integers(0, n, task.n_surface)
        batch = OrientedPointCloud(cloud.points[idx], cloud.normals[idx])
        uniform = domain.uniform(rng, task.n_uniform)
        return loss_sdf_points(field_, tape, batch, uniform, task, precond, step)

    _train(params, adam, optim.steps, loss_fn, precond, report, optim.eval_every)
    if reference is not None:
        ch = surface_chamfer(field_, reference, eval_cfg, seed)
        report.metrics["chamfer"] = ch
        report.rows[-1]["chamfer"] = ch
    return TaskResult(field_, params, report, precond)


# ---------------------------------------------------------------------------
# direct SDF fitting
# ---------------------------------------------------------------------------


def direct_batch(cloud: OrientedPointCloud, oracle, cfg: DirectSdfConfig, domain: DomainBounds,
                 rng: np.random.Generator, size: int | None = None):
    """One 50/25/25-style batch: returns ``(x, d, counts)``."""
    size = cfg.batch if size is None else size
    counts = rng.multinomial(size, cfg.mix)
    surf = cloud.points[rng.integers(0, len(cloud), counts[0])]
    near = cloud.points[rng.integers(0, len(cloud), counts[1])]
    # clip before querying the oracle so supervision matches the trained coordinate
    near = np.clip(near + rng.normal(0.0, cfg.near_sigma, near.shape), domain.lo_arr, np.asarray(domain.hi, dtype=np.float64))
    uni = domain.uniform(rng, int(counts[2]))
    x = np.concatenate([surf, near, uni], axis=0)
    d = np.concatenate([np.zeros(len(surf)), oracle(near) if len(near) else np.zeros(0),
                        oracle(uni) if len(uni) else np.zeros(0)])
    return x, d, counts


def fit_sdf_direct(oracle, shape, field_config: FieldConfig, task: DirectSdfConfig | None = None,
                   optim: OptimConfig | None = None, precond_config: PrecondConfig | None = None,
                   seed: int = 0, eval_cfg: EvalConfig | None = None,
                   domain: DomainBounds | None = None) -> TaskResult:
    """Fit ground-truth signed distances with a MAPE loss.

    Supervision is evaluated at the unperturbed sample; only the field
    query is perturbed. The report's ``mape`` is measured unperturbed on a
    fixed held-out batch drawn with the same mix.
    """
    task = task or DirectSdfConfig()
    optim = optim or OptimConfig()
    precond_config = precond_config or PrecondConfig()
    eval_cfg = eval_cfg or EvalConfig()
    task.validate()
    optim.validate()
    dim = field_config.input_dim
    domain = domain or DomainBounds.unit(dim)
    cloud = sample_shape(shape, task.cloud_points, noise_rng(seed, _CLOUD))

    params = dc.ParamStore()
    field_ = build_field(field_config, params, domain, rng=_init_rng(seed))
    precond = precond_config.build(domain, optim.steps, seed, params)
    adam = _adam_for(params, optim, precond_config)
    report = RunReport(seed, config_hash("sdf_direct", task, field_config, optim, precond_config, eval_cfg))

    def loss_fn(tape, step):
        x, d, _ = direct_batch(cloud, oracle, task, domain, noise_rng(seed, _BATCH, step))
        pred = field_.query(tape, x) if precond is None else precond.query(field_, tape, x, step)
        return loss_mape(pred, d, task.epsilon)

    _train(params, adam, optim.steps, loss_fn, precond, report, optim.eval_every)
    xe, de, _ = direct_batch(cloud, oracle, task, domain, noise_rng(seed, _EVAL, 2), eval_cfg.mape_samples)
    report.metrics["mape"] = loss_mape(field_(xe), de, task.epsilon)
    return TaskResult(field_, params, report, precond)
