"""Stochastic preconditioning: noisy query coordinates during optimization.

Perturbing every field query ``x -> reflect(x + delta)`` with zero-mean
noise of per-axis std ``alpha`` optimizes, in expectation, the field blurred
by the noise kernel. ``alpha`` comes from a schedule that decays to zero, or
from a trainable grid ``alpha(x)`` reached through the reparameterization
``delta = alpha(x) * n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import diffcore as dc
from .domain import DomainBounds, clamp_into_domain, reflect_into_domain
from .fields import Field, multilinear_lookup, stencil_eval

__all__ = [
    "KERNELS",
    "sample_noise",
    "reflect_into_domain",
    "clamp_into_domain",
    "Constant",
    "ExpDecay",
    "Step",
    "alpha_at",
    "AlphaGrid",
    "Preconditioner",
    "perturb_query",
    "perturb_adaptive",
    "blur_estimate",
    "noise_rng",
]

KERNELS = ("gaussian", "uniform", "squared_gaussian")

_SQRT3 = math.sqrt(3.0)


def noise_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox counter-based generator keyed by ``(seed, *stream)``.

    Streams like ``(purpose, step, sample_index)`` reproduce identically on
    any platform and never overlap.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


def sample_noise(kernel: str, alpha: float, shape, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. zero-mean offsets with per-axis standard deviation ``alpha``.

    gaussian: N(0, alpha^2); uniform: U(-alpha*sqrt3, alpha*sqrt3);
    squared_gaussian: sign(z) z^2 alpha/sqrt3 with z ~ N(0, 1), since E[z^4] = 3.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return np.zeros(shape)
    if kernel == "gaussian":
        return alpha * rng.standard_normal(shape)
    if kernel == "uniform":
        return rng.uniform(-alpha * _SQRT3, alpha * _SQRT3, shape)
    if kernel == "squared_gaussian":
        z = rng.standard_normal(shape)
        return np.sign(z) * z * z * (alpha / _SQRT3)
    raise ValueError(f"unknown noise kernel {kernel!r}; expected one of {KERNELS}")


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    alpha: float

    def __call__(self, step: int, total_steps: int | None = None) -> float:
        return self.alpha


@dataclass(frozen=True)
class ExpDecay:
    """Geometric decay from ``alpha0`` to ``floor_ratio * alpha0``, then 0."""

    alpha0: float
    end_step: int
    floor_ratio: float = 1e-3

    def __call__(self, step: int, total_steps: int | None = None) -> float:
        if step >= self.end_step:
            return 0.0
        return self.alpha0 * self.floor_ratio ** (step / self.end_step)


@dataclass(frozen=True)
class Step:
    """``alpha0`` until ``end_step``, zero afterwards."""

    alpha0: float
    end_step: int

    def __call__(self, step: int, total_steps: int | None = None) -> float:
        return self.alpha0 if step < self.end_step else 0.0


Schedule = Union[Constant, ExpDecay, Step]


def alpha_at(schedule: Schedule, step: int, total_steps: int | None = None) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return float(schedule(step, total_steps))


# ---------------------------------------------------------------------------
# spatially varying alpha
# ---------------------------------------------------------------------------


class AlphaGrid:
    """Trainable blur scales on a regular vertex grid over the domain.

    Registered as the ``alpha_grid`` block. Reads are taken at the
    unperturbed query location and clamped at zero on the tape.
    """

    block = "alpha_grid"

    def __init__(self, params: dc.ParamStore, domain: DomainBounds, resolution, alpha_init: float,
                 mode: str = "linear"):
        if mode not in ("linear", "nearest"):
            raise ValueError("alpha grid mode must be 'linear' or 'nearest'")
        res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (domain.dim,)).copy()
        if (res < 2).any():
            raise ValueError("alpha grid resolution must be >= 2 vertices per axis")
        self.params = params
        self.domain = domain
        self.vertices = res
        self.mode = mode
        self.alpha_init = alpha_init
        params.register(self.block, np.full((int(np.prod(res)), 1), float(alpha_init)))

    def values(self) -> np.ndarray:
        """Grid as an array indexed ``[i_{m-1}, ..., i_0]`` (axis 0 fastest in memory)."""
        return self.params.get(self.block).reshape(tuple(reversed(self.vertices.tolist())))

    def read(self, tape: dc.Tape, x: np.ndarray) -> dc.Node:
        """alpha(x) >= 0 as an (N, 1) node."""
        u = self.domain.normalize(np.asarray(x, dtype=np.float64))
        if self.mode == "nearest":
            u = np.round(u * (self.vertices - 1)) / (self.vertices - 1)
        a = multilinear_lookup(tape.param(self.block), u, self.vertices - 1, None)
        return dc.relu(a)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.read(dc.Tape(self.params, check_nan=False), x).value[:, 0]


# ---------------------------------------------------------------------------
# the preconditioner
# ---------------------------------------------------------------------------


@dataclass
class Preconditioner:
    """Noise kernel plus either a global schedule or an :class:`AlphaGrid`.

    ``alpha`` values are in domain units. ``samples > 1`` averages several
    independent perturbations per query instead of the single-sample rule.
    """

    domain: DomainBounds
    kernel: str = "gaussian"
    schedule: Schedule | None = None
    alpha_grid: AlphaGrid | None = None
    seed: int = 0
    samples: int = 1
    _stream: int = field(default=7, repr=False)

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown noise kernel {self.kernel!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.schedule is not None and self.alpha_grid is not None:
            raise ValueError("use either a schedule or an alpha grid, not both")

    @property
    def adaptive(self) -> bool:
        return self.alpha_grid is not None

    def alpha(self, step: int) -> float:
        if self.adaptive:
            return float(np.maximum(self.alpha_grid.params.get(AlphaGrid.block), 0).mean())
        if self.schedule is None:
            return 0.0
        return alpha_at(self.schedule, step)

    def active(self, step: int) -> bool:
        return self.adaptive or self.alpha(step) > 0.0

    def rng(self, step: int, sample: int, call: int = 0) -> np.random.Generator:
        return noise_rng(self.seed, self._stream, step, sample, call)

    def offsets(self, tape: dc.Tape, x: np.ndarray, step: int, sample: int = 0, call: int = 0):
        """Per-point offsets for one sample: an array, or a node when adaptive."""
        x = np.asarray(x, dtype=np.float64)
        if self.adaptive:
            base = self.rng(step, sample, call).standard_normal(x.shape)
            return self.alpha_grid.read(tape, x) * base
        a = self.alpha(step)
        if a == 0.0:
            return np.zeros_like(x)
        return sample_noise(self.kernel, a, x.shape, self.rng(step, sample, call))

    def query(self, field_: Field, tape: dc.Tape, x: np.ndarray, step: int, call: int = 0) -> dc.Node:
        """Preconditioned field values at ``x``; plain query when inactive."""
        if not self.active(step):
            return field_.query(tape, x)
        outs = []
        for s in range(self.samples):
            q = reflect_into_domain(x + self.offsets(tape, x, step, s, call), self.domain)
            outs.append(field_.query(tape, q))
        return _average(outs)

    def stencil(self, field_: Field, tape: dc.Tape, x: np.ndarray, step: int, h: float | None = None,
                call: int = 0):
        """Values and FD gradients with one shared offset per point and sample."""
        if not self.active(step):
            return stencil_eval(field_, tape, x, h)
        vals, grads = [], []
        for s in range(self.samples):
            v, g = stencil_eval(field_, tape, x, h, shared_offset=self.offsets(tape, x, step, s, call))
            vals.append(v)
            grads.append(g)
        return _average(vals), _average(grads)


def _average(nodes):
    if len(nodes) == 1:
        return nodes[0]
    total = nodes[0]
    for n in nodes[1:]:
        total = total + n
    return total * (1.0 / len(nodes))


def perturb_query(field_: Field, tape: dc.Tape, x: np.ndarray, alpha: float, kernel: str,
                  rng: np.random.Generator) -> dc.Node:
    """Single-sample ``f(reflect(x + delta))``; delta is a tape constant."""
    x = np.asarray(x, dtype=np.float64)
    delta = sample_noise(kernel, alpha, x.shape, rng)
    return field_.query(tape, reflect_into_domain(x + delta, field_.domain))


def perturb_adaptive(field_: Field, alpha_grid: AlphaGrid, tape: dc.Tape, x: np.ndarray,
                     rng: np.random.Generator | None = None, base_noise: np.ndarray | None = None) -> dc.Node:
    """``f(reflect(x + alpha(x) n))`` with gradients reaching the alpha cells.

    Pass ``base_noise`` to freeze n (finite-difference checks).
    """
    x = np.asarray(x, dtype=np.float64)
    n = base_noise if base_noise is not None else rng.standard_normal(x.shape)
    q = reflect_into_domain(alpha_grid.read(tape, x) * n + x, field_.domain)
    return field_.query(tape, q)


def blur_estimate(f: Callable[[np.ndarray], np.ndarray], x, alpha: float, kernel: str, n_samples: int,
                  rng: np.random.Generator, domain: DomainBounds | None = None, chunk: int = 1 << 20):
    """Monte-Carlo ``E[f(reflect(x + delta))]`` per point, with standard error.

    ``f`` maps (N, m) coordinates to (N,) or (N, 1) values; ``x`` is one
    point or an (P, m) batch. Returns ``(mean, stderr)`` arrays of length P.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    domain = domain or DomainBounds.unit(pts.shape[1])
    if alpha == 0.0:
        # no noise: the expectation is the point value itself
        v = np.asarray(f(reflect_into_domain(pts, domain)), dtype=np.float64).reshape(len(pts), -1)[:, 0]
        return v.copy(), np.zeros(len(pts))
    means, errs = [], []
    for p in pts:
        total = 0.0
        total_sq = 0.0
        done = 0
        while done < n_samples:
            k = min(chunk, n_samples - done)
            q = reflect_into_domain(p + sample_noise(kernel, alpha, (k, pts.shape[1]), rng), domain)
            v = np.asarray(f(q), dtype=np.float64).reshape(k, -1)[:, 0]
            total += v.sum()
            total_sq += (v * v).sum()
            done += k
        mu = total / n_samples
        var = max(total_sq / n_samples - mu * mu, 0.0)
        means.append(mu)
        errs.append(math.sqrt(var / max(n_samples - 1, 1)) if n_samples > 1 else 0.0)
    return np.array(means), np.array(errs)
