"""Field representations f: R^m -> R^n and their encodings.

All fields take coordinates in domain units. ``query`` records onto a
:class:`~fieldforge.diffcore.Tape` and accepts either a constant array or a
tape node for the coordinates (the latter lets gradients reach whatever
produced the coordinates, e.g. an optimizable blur scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .domain import DomainBounds, reflect_into_domain

KINDS = ("plain_mlp", "fourier_mlp", "hashgrid_mlp", "relu_grid")

# INGP spatial-hash primes; the first axis uses 1 for cache coherence
_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


class UnsupportedArchitecture(ValueError):
    pass


@dataclass
class MlpConfig:
    hidden_width: int = 64
    depth: int = 2
    activation: str = "relu"  # relu | sine
    sine_omega: float = 30.0


@dataclass
class FourierConfig:
    num_frequencies: int = 6
    include_raw_coords: bool = True


@dataclass
class HashgridConfig:
    levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 256
    table_size_log2: int = 15
    features_per_level: int = 2
    init_scale: float = 1e-4

    def resolutions(self) -> list[int]:
        """Cells per axis on each level, geometric from base to max."""
        if self.levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1)
        )
        return [int(math.floor(self.base_resolution * growth**lvl + 1e-9)) for lvl in range(self.levels)]


@dataclass
class GridConfig:
    resolution: list[int] = field(default_factory=lambda: [64])  # vertices per axis
    relu: bool = True
    init_value: float = 0.0


@dataclass
class FieldConfig:
    input_dim: int = 2
    output_dim: int = 1
    kind: str = "hashgrid_mlp"
    mlp: MlpConfig = field(default_factory=MlpConfig)
    fourier: FourierConfig = field(default_factory=FourierConfig)
    hashgrid: HashgridConfig = field(default_factory=HashgridConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> None:
        if self.input_dim not in (1, 2, 3):
            raise ValueError("field.input_dim must be 1, 2 or 3")
        if self.output_dim < 1:
            raise ValueError("field.output_dim must be >= 1")
        if self.kind not in KINDS:
            raise ValueError(f"field.kind must be one of {KINDS}")
        if self.mlp.activation not in ("relu", "sine"):
            raise ValueError("field.mlp.activation must be relu or sine")
        if self.mlp.depth < 1 or self.mlp.hidden_width < 1:
            raise ValueError("field.mlp depth and hidden_width must be >= 1")
        hg = self.hashgrid
        if hg.levels < 1:
            raise ValueError("field.hashgrid.levels must be >= 1")
        if hg.base_resolution < 2 or hg.max_resolution < hg.base_resolution:
            raise ValueError("field.hashgrid needs 2 <= base_resolution <= max_resolution")
        if self.fourier.num_frequencies < 0:
            raise ValueError("field.fourier.num_frequencies must be >= 0")
        if any(r < 2 for r in self.grid.resolution):
            raise ValueError("field.grid.resolution entries must be >= 2")


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------


def fourier_encode(x, num_frequencies: int, include_raw: bool = True):
    """``[x?, sin(2^k pi x_j), cos(2^k pi x_j)]`` for k < L, per axis j.

    Works on arrays and tape nodes; length ``m * 2L (+ m)``.
    """
    if num_frequencies < 0:
        raise ValueError("num_frequencies must be >= 0")
    freqs = np.pi * 2.0 ** np.arange(num_frequencies)
    parts = [x] if include_raw else []
    is_node = isinstance(x, dc.Node)
    for w in freqs:
        arg = x * w
        if is_node:
            parts += [dc.sin(arg), dc.cos(arg)]
        else:
            parts += [np.sin(arg), np.cos(arg)]
    if not parts:
        n = x.shape[0]
        return np.zeros((n, 0))
    if is_node:
        return dc.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return np.concatenate(parts, axis=-1)


def corner_bits(dim: int) -> np.ndarray:
    """(2^dim, dim) table of {0,1} corner offsets."""
    return np.array([[(k >> j) & 1 for j in range(dim)] for k in range(2**dim)], dtype=np.int64)


def grid_indices(corners: np.ndarray, cells: np.ndarray, table_size: int | None) -> np.ndarray:
    """Table rows for integer vertex coordinates ``corners`` (..., dim).

    Dense row-major indexing when ``table_size`` is None, otherwise the
    XOR-of-primes spatial hash modulo ``table_size``.
    """
    dim = corners.shape[-1]
    if table_size is None:
        strides = np.cumprod(np.concatenate([[1], cells[:-1] + 1])).astype(np.int64)
        return (corners * strides).sum(-1)
    c = corners.astype(np.uint64)
    h = c[..., 0] * _PRIMES[0]
    for j in range(1, dim):
        h ^= c[..., j] * _PRIMES[j]
    return (h % np.uint64(table_size)).astype(np.int64)


def _axis_pairs(base: np.ndarray, hashed: bool) -> list[np.ndarray]:
    pairs = []
    for j in range(base.shape[1]):
        p = np.stack([base[:, j], base[:, j] + 1], axis=1)
        pairs.append(p.astype(np.uint64) * _PRIMES[j] if hashed else p)
    return pairs


def _outer(pairs: list[np.ndarray], combine) -> np.ndarray:
    """Combine per-axis (N, 2) pairs into (N, 2^m) with bit j of the corner
    index selecting the pair entry of axis j."""
    out = pairs[0]
    for j in range(1, len(pairs)):
        out = combine(pairs[j][:, :, None], out[:, None, :]).reshape(out.shape[0], -1)
    return out


def multilinear_lookup(table: dc.Node, u, cells, table_size: int | None = None) -> dc.Node:
    """Multilinear interpolation of table features at unit coordinates ``u``.

    ``cells`` gives cells per axis (vertices = cells + 1). Coordinates are
    clamped to the unit box, so out-of-domain points read the boundary cell.
    When ``u`` is a node its gradient flows through the corner weights.
    """
    uv = u.value if isinstance(u, dc.Node) else np.asarray(u, dtype=np.float64)
    dim = uv.shape[-1]
    cells = np.broadcast_to(np.asarray(cells, dtype=np.int64), (dim,))
    uc = np.clip(uv, 0.0, 1.0)
    pos_v = uc * cells
    base = np.minimum(pos_v.astype(np.int64), cells - 1)

    if table_size is None:
        strides = np.cumprod(np.concatenate([[1], cells[:-1] + 1])).astype(np.int64)
        pairs = [p * strides[j] for j, p in enumerate(_axis_pairs(base, False))]
        index = _outer(pairs, np.add)
    else:
        index = (_outer(_axis_pairs(base, True), np.bitwise_xor) % np.uint64(table_size)).astype(np.int64)

    if isinstance(u, dc.Node):
        # clamped coordinates carry no gradient
        inside = (uv >= 0.0) & (uv <= 1.0)
        frac = dc.where(inside, u, uc) * cells.astype(np.float64) - base
        bits = corner_bits(dim)
        slope = 2.0 * bits - 1.0
        offset = 1.0 - bits
        weights = None
        for j in range(dim):
            sel = frac[:, j : j + 1] * slope[:, j] + offset[:, j]
            weights = sel if weights is None else weights * sel
    else:
        frac = pos_v - base
        weights = _outer([np.stack([1.0 - frac[:, j], frac[:, j]], axis=1) for j in range(dim)], np.multiply)
    return dc.gather_weighted(table, index, weights)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


class Mlp:
    """Dense layers stored as ``{prefix}.layer{i}.w`` / ``.b`` blocks."""

    def __init__(self, params: dc.ParamStore, prefix: str, n_in: int, n_out: int, cfg: MlpConfig, rng):
        self.params = params
        self.cfg = cfg
        self.names = []
        widths = [n_in] + [cfg.hidden_width] * cfg.depth + [n_out]
        self.widths = widths
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if cfg.activation == "sine":
                if i == 0:
                    bound = 1.0 / a
                else:
                    bound = math.sqrt(6.0 / a) / cfg.sine_omega
                bias = rng.uniform(-1.0 / math.sqrt(a), 1.0 / math.sqrt(a), b)
            else:
                bound = math.sqrt(6.0 / a)
                bias = np.zeros(b)
            w = rng.uniform(-bound, bound, (a, b))
            wn = params.register(f"{prefix}.layer{i}.w", w)
            bn = params.register(f"{prefix}.layer{i}.b", bias)
            self.names.append((wn, bn))

    def __call__(self, tape: dc.Tape, h):
        last = len(self.names) - 1
        for i, (wn, bn) in enumerate(self.names):
            h = dc.affine(h, tape.param(wn), tape.param(bn))
            if i < last:
                if self.cfg.activation == "sine":
                    h = dc.sin(h * self.cfg.sine_omega)
                else:
                    h = dc.relu(h)
        return h


class Field:
    """Base class: a parametric field over ``domain``."""

    def __init__(self, config: FieldConfig, params: dc.ParamStore, domain: DomainBounds | None = None,
                 prefix: str = "field", rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self.params = params
        self.domain = domain or DomainBounds.unit(config.input_dim)
        if self.domain.dim != config.input_dim:
            raise ValueError("domain dimension does not match field input_dim")
        self.prefix = prefix
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    def _check(self, x):
        shape = x.shape
        if len(shape) != 2 or shape[1] != self.input_dim:
            raise ValueError(f"expected coordinates of shape (N, {self.input_dim}), got {shape}")

    def _centered(self, x):
        # [-1, 1] coordinates fed to MLPs
        return self.domain.normalize(x) * 2.0 - 1.0

    def query(self, tape: dc.Tape, x) -> dc.Node:
        self._check(x)
        return self._query(tape, x)

    def _query(self, tape, x):
        raise NotImplementedError

    def __call__(self, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Evaluate without keeping a tape; returns (N, n)."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        out = []
        for s in range(0, x.shape[0], chunk):
            tape = dc.Tape(self.params, check_nan=False)
            out.append(self._query(tape, x[s : s + chunk]).value)
        if not out:
            return np.zeros((0, self.config.output_dim))
        return np.concatenate(out, axis=0)

    def default_fd_step(self) -> float:
        return float(self.domain.extent.max()) / 256.0

    def block_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith(self.prefix + ".")]


class PlainMlp(Field):
    def __init__(self, config, params, domain=None, prefix="field", rng=None):
        super().__init__(config, params, domain, prefix, rng)
        self.n_raw = config.input_dim
        self.mlp = Mlp(params, f"{prefix}.mlp", config.input_dim, config.output_dim, config.mlp, self.rng)

    def _query(self, tape, x):
        return self.mlp(tape, self._centered(x))


class FourierMlp(Field):
    def __init__(self, config, params, domain=None, prefix="field", rng=None):
        super().__init__(config, params, domain, prefix, rng)
        fc = config.fourier
        m = config.input_dim
        self.n_raw = m if fc.include_raw_coords else 0
        n_in = m * 2 * fc.num_frequencies + self.n_raw
        self.mlp = Mlp(params, f"{prefix}.mlp", n_in, config.output_dim, config.mlp, self.rng)

    def _query(self, tape, x):
        fc = self.config.fourier
        return self.mlp(tape, fourier_encode(self._centered(x), fc.num_frequencies, fc.include_raw_coords))

    def default_fd_step(self) -> float:
        top = 2.0 ** max(self.config.fourier.num_frequencies - 1, 0)
        return float(self.domain.extent.max()) / (64.0 * top)


class HashgridMlp(Field):
    """Multi-resolution hash encoding followed by a small MLP.

    The MLP input is the centered raw coordinates concatenated with the
    per-level features, which is what makes geometric initialization apply.
    """

    def __init__(self, config, params, domain=None, prefix="field", rng=None):
        super().__init__(config, params, domain, prefix, rng)
        hg = config.hashgrid
        m = config.input_dim
        self.table_size = 2**hg.table_size_log2
        self.levels = []
        for lvl, res in enumerate(hg.resolutions()):
            dense = (res + 1) ** m
            hashed = dense > self.table_size
            rows = self.table_size if hashed else dense
            init = self.rng.uniform(-hg.init_scale, hg.init_scale, (rows, hg.features_per_level))
            name = params.register(f"{prefix}.hash.level{lvl}", init)
            self.levels.append((name, res, self.table_size if hashed else None))
        self.n_raw = m
        n_in = m + hg.levels * hg.features_per_level
        self.mlp = Mlp(params, f"{prefix}.mlp", n_in, config.output_dim, config.mlp, self.rng)

    def encode(self, tape, x):
        """Concatenated per-level features, length levels * features_per_level."""
        u = self.domain.normalize(x)
        feats = [multilinear_lookup(tape.param(name), u, res, size) for name, res, size in self.levels]
        return dc.concat(feats, axis=-1)

    def _query(self, tape, x):
        return self.mlp(tape, dc.concat([self._centered(x), self.encode(tape, x)], axis=-1))

    def default_fd_step(self) -> float:
        return float(self.domain.extent.max()) / self.config.hashgrid.max_resolution


class ReluGrid(Field):
    """Dense multilinear grid, optionally followed by a single ReLU."""

    def __init__(self, config, params, domain=None, prefix="field", rng=None):
        super().__init__(config, params, domain, prefix, rng)
        res = list(config.grid.resolution)
        if len(res) == 1:
            res = res * config.input_dim
        if len(res) != config.input_dim:
            raise ValueError("field.grid.resolution needs one entry or one per axis")
        self.vertices = np.array(res, dtype=np.int64)
        n = int(np.prod(self.vertices))
        self.name = params.register(
            f"{prefix}.grid", np.full((n, config.output_dim), config.grid.init_value, dtype=np.float64)
        )

    def vertex_positions(self) -> np.ndarray:
        """Domain coordinates of every grid vertex, in table row order."""
        axes = [np.linspace(0.0, 1.0, v) for v in self.vertices]
        mesh = np.meshgrid(*axes, indexing="ij")
        # row-major with axis 0 fastest, matching grid_indices
        u = np.stack([g.transpose(*reversed(range(len(axes)))).ravel() for g in mesh], axis=-1)
        return self.domain.denormalize(u)

    def _query(self, tape, x):
        u = self.domain.normalize(x)
        out = multilinear_lookup(tape.param(self.name), u, self.vertices - 1, None)
        return dc.relu(out) if self.config.grid.relu else out

    def default_fd_step(self) -> float:
        return float((self.domain.extent / (self.vertices - 1)).min()) * 0.25


_CLASSES = {
    "plain_mlp": PlainMlp,
    "fourier_mlp": FourierMlp,
    "hashgrid_mlp": HashgridMlp,
    "relu_grid": ReluGrid,
}


def build_field(config: FieldConfig, params: dc.ParamStore, domain: DomainBounds | None = None,
                prefix: str = "field", rng: np.random.Generator | None = None) -> Field:
    config.validate()
    return _CLASSES[config.kind](config, params, domain, prefix, rng)


def field_query(field_: Field, tape: dc.Tape, x) -> dc.Node:
    return field_.query(tape, x)


# ---------------------------------------------------------------------------
# spatial gradients and geometric init
# ---------------------------------------------------------------------------


def stencil_eval(field_: Field, tape: dc.Tape, x, h: float | None = None, shared_offset=None,
                 reflect: bool = True):
    """Center values and central-difference gradients from one batched query.

    Returns ``(values (N, n), grads (N, n, m))``. The same ``shared_offset``
    shifts the center and every stencil point; each point is reflected into
    the domain before querying.
    """
    h = field_.default_fd_step() if h is None else h
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    xv = x.value if isinstance(x, dc.Node) else np.asarray(x, dtype=np.float64)
    n_pts, m = xv.shape
    q = x if shared_offset is None else x + shared_offset
    pts = [q]
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        pts += [q + e, q - e]
    if any(isinstance(p, dc.Node) for p in pts):
        stacked = dc.concat(pts, axis=0)
    else:
        stacked = np.concatenate(pts, axis=0)
    if reflect:
        stacked = reflect_into_domain(stacked, field_.domain)
    out = field_.query(tape, stacked)
    n_out = out.shape[1]
    values = out[0:n_pts]
    cols = []
    for j in range(m):
        plus = out[(1 + 2 * j) * n_pts : (2 + 2 * j) * n_pts]
        minus = out[(2 + 2 * j) * n_pts : (3 + 2 * j) * n_pts]
        cols.append(dc.reshape((plus - minus) * (0.5 / h), (n_pts, n_out, 1)))
    grads = dc.concat(cols, axis=-1) if m > 1 else cols[0]
    return values, grads


def spatial_gradient_fd(field_: Field, tape: dc.Tape, x, h: float | None = None, shared_offset=None):
    """Central-difference spatial gradient, shape (N, n, m)."""
    return stencil_eval(field_, tape, x, h, shared_offset)[1]


def geometric_init(field_: Field, bias: float = 0.1, rng: np.random.Generator | None = None) -> None:
    """Initialize an MLP-based field to roughly the SDF of a sphere of radius
    ``bias`` about the domain center (negative inside).

    Hidden layers get N(0, 2/width) weights and zero bias; encoded (non-raw)
    inputs of the first layer are zeroed; the last layer gets weights near
    sqrt(pi / width), scaled to domain units, and bias ``-bias``.
    """
    if not isinstance(field_, (PlainMlp, FourierMlp, HashgridMlp)):
        raise UnsupportedArchitecture("geometric init needs an MLP-based field")
    if field_.config.mlp.activation != "relu":
        raise UnsupportedArchitecture("geometric init needs ReLU activations")
    if field_.n_raw == 0:
        raise UnsupportedArchitecture("geometric init needs raw coordinates among the MLP inputs")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = field_.params
    names = field_.mlp.names
    half_extent = 0.5 * float(field_.domain.extent.max())
    for i, (wn, bn) in enumerate(names):
        n_in, n_out = params.shape(wn)
        if i < len(names) - 1:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(n_out), (n_in, n_out))
            if i == 0:
                w[field_.n_raw :, :] = 0.0
            params.set(wn, w)
            params.set(bn, 0.0)
        else:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(n_in), 1e-4, (n_in, n_out))
            params.set(wn, w * half_extent)
            params.set(bn, -bias)
