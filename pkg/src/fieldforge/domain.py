"""Axis-aligned domain bounds and reflection back into them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class DomainBounds:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ValueError("lo and hi must have the same length")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"domain needs lo < hi on every axis, got {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit(cls, dim: int) -> "DomainBounds":
        return cls((0.0,) * dim, (1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def normalize(self, x):
        """Map to the unit box; works on arrays and tape nodes."""
        return (x - self.lo_arr) * (1.0 / self.extent)

    def denormalize(self, u):
        return u * self.extent + self.lo_arr

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo_arr) & (x <= np.array(self.hi)), axis=-1)

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo_arr + rng.random((n, self.dim)) * self.extent


def _fold_unit(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reflect unit-box coordinates; returns (folded, slope in {+1, -1})."""
    r = np.mod(u, 2.0)
    upper = r > 1.0
    folded = np.where(upper, 2.0 - r, r)
    inside = (u >= 0.0) & (u <= 1.0)
    # interior points pass through untouched so alpha = 0 is bitwise identity
    folded = np.where(inside, u, folded)
    slope = np.where(inside | ~upper, 1.0, -1.0)
    return folded, slope


def reflect_into_domain(x, bounds: DomainBounds):
    """Fold coordinates back into ``bounds`` by mirror reflection.

    Per axis in unit coordinates: ``r = x mod 2`` (non-negative), keep ``r``
    if ``r <= 1`` else ``2 - r``. Repeated reflections are handled by the
    modulo. Accepts arrays or tape nodes; for nodes the derivative is the
    piecewise slope (+1 or -1).
    """
    if isinstance(x, dc.Node):
        xv = x.value
        inside = bounds.contains(xv)
        if inside.all():
            return x
        u = (xv - bounds.lo_arr) / bounds.extent
        folded, slope = _fold_unit(u)
        out = np.clip(folded * bounds.extent + bounds.lo_arr, bounds.lo_arr, np.array(bounds.hi))
        out = np.where((u >= 0) & (u <= 1), xv, out)
        return x.tape.record(out, [(x, lambda g: g * slope)], op="reflect")
    x = np.asarray(x, dtype=np.float64)
    u = (x - bounds.lo_arr) / bounds.extent
    folded, _ = _fold_unit(u)
    out = np.clip(folded * bounds.extent + bounds.lo_arr, bounds.lo_arr, np.array(bounds.hi))
    return np.where((u >= 0) & (u <= 1), x, out)


def clamp_into_domain(x, bounds: DomainBounds):
    """Clamp instead of reflect (only used to contrast boundary artifacts)."""
    return np.clip(x, bounds.lo_arr, np.array(bounds.hi))
