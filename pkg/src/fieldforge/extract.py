"""Level-set extraction: marching squares (2D) and marching cubes (3D).

Edge crossings are placed by linear interpolation or by bisection on the
sign of the field, which depends only on the sign pattern and therefore is
robust to fields whose magnitude is not a distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .domain import DomainBounds
from .geometry import TriMesh

MODES = ("linear", "bisection")
_NUDGE = 1e-12


@dataclass
class ExtractionConfig:
    resolution: int | tuple = 64  # samples per axis
    iso: float = 0.0
    mode: str = "linear"
    bisection_steps: int = 8

    def validate(self, dim: int) -> np.ndarray:
        res = np.broadcast_to(np.asarray(self.resolution, dtype=np.int64), (dim,)).copy()
        if (res < 2).any():
            raise ValueError("extraction resolution must be >= 2 per axis")
        if self.mode not in MODES:
            raise ValueError(f"extraction mode must be one of {MODES}")
        if self.mode == "bisection" and self.bisection_steps < 1:
            raise ValueError("bisection needs at least one step")
        return res


@dataclass
class Contour2D:
    vertices: np.ndarray  # (V, 2)
    segments: np.ndarray  # (S, 2) vertex indices, oriented with the low side on the left

    @property
    def segment_points(self) -> np.ndarray:
        return self.vertices[self.segments] if len(self.segments) else np.zeros((0, 2, 2))

    def polylines(self) -> list[np.ndarray]:
        """Chain segments into polylines (closed loops repeat their first vertex)."""
        nxt = {int(a): int(b) for a, b in self.segments}
        has_prev = {int(b) for _, b in self.segments}
        seen: set[int] = set()
        lines = []
        starts = [a for a in nxt if a not in has_prev] + list(nxt)
        for s in starts:
            if s in seen:
                continue
            chain = [s]
            seen.add(s)
            cur = s
            while cur in nxt:
                cur = nxt[cur]
                chain.append(cur)
                if cur in seen:
                    break
                seen.add(cur)
            lines.append(self.vertices[chain])
        return lines

    def save_csv(self, path) -> None:
        pts = self.segment_points.reshape(-1, 4)
        header = "x0,y0,x1,y1"
        np.savetxt(path, pts, delimiter=",", header=header, comments="", fmt="%.9g")


def _as_scalar_fn(field):
    def f(x):
        return np.asarray(field(x), dtype=np.float64).reshape(len(x), -1)[:, 0]

    return f


def _sample_grid(f, res: np.ndarray, domain: DomainBounds):
    axes = [np.linspace(lo, hi, int(r)) for lo, hi, r in zip(domain.lo, domain.hi, res)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(res))
    return pts, f(pts).reshape(tuple(res))


def _place_vertices(f, p0, p1, v0, v1, cfg: ExtractionConfig):
    """Crossing location on each edge p0 -> p1 (values v0, v1 on opposite sides)."""
    if cfg.mode == "linear":
        t = (cfg.iso - v0) / (v1 - v0)
        return p0 + t[:, None] * (p1 - p0)
    lo, hi = p0.copy(), p1.copy()
    lo_below = v0 < cfg.iso
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (lo + hi)
        vm = f(mid)
        vm = np.where(vm == cfg.iso, cfg.iso + _NUDGE, vm)
        same = (vm < cfg.iso) == lo_below
        lo = np.where(same[:, None], mid, lo)
        hi = np.where(same[:, None], hi, mid)
    return 0.5 * (lo + hi)


def marching_cubes(field, config: ExtractionConfig | None = None, domain: DomainBounds | None = None) -> TriMesh:
    """Triangle mesh of the ``iso`` level set of a 3D field.

    ``field`` maps (N, 3) coordinates to (N,) or (N, n) values (channel 0 is
    used). Vertices are shared through a per-grid-edge cache, so the output
    is watertight wherever the level set does not leave the grid.
    """
    config = config or ExtractionConfig()
    domain = domain or DomainBounds.unit(3)
    res = config.validate(3)
    f = _as_scalar_fn(field)
    pts, vals = _sample_grid(f, res, domain)
    vals = np.where(vals == config.iso, config.iso + _NUDGE, vals)
    below = vals < config.iso
    cells = res - 1
    ci, cj, ck = np.meshgrid(*[np.arange(c) for c in cells], indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    case = np.zeros(len(ci), dtype=np.int64)
    for b, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[ci + dx, cj + dy, ck + dz].astype(np.int64) << b
    active = (case != 0) & (case != 255)
    ci, cj, ck, case = ci[active], cj[active], ck[active], case[active]
    if not len(case):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    tri_edges = TRI_TABLE[case]  # (C, 15)
    cell_of = np.repeat(np.arange(len(case)), 15).reshape(len(case), 15)
    keep = tri_edges >= 0
    e_local = tri_edges[keep]
    cell = cell_of[keep]
    # global edge key: start vertex flat index and axis
    a, b = EDGES[e_local, 0], EDGES[e_local, 1]
    sa = CORNERS[a] + np.stack([ci[cell], cj[cell], ck[cell]], -1)
    sb = CORNERS[b] + np.stack([ci[cell], cj[cell], ck[cell]], -1)
    start = np.minimum(sa, sb)
    axis = np.argmax(np.abs(sb - sa), axis=1)
    flat = np.ravel_multi_index(start.T, tuple(res))
    key = flat * 3 + axis
    uniq, inverse = np.unique(key, return_inverse=True)

    u_flat, u_axis = uniq // 3, uniq % 3
    u_start = np.stack(np.unravel_index(u_flat, tuple(res)), -1)
    u_end = u_start + np.eye(3, dtype=np.int64)[u_axis]
    i0 = np.ravel_multi_index(u_start.T, tuple(res))
    i1 = np.ravel_multi_index(u_end.T, tuple(res))
    verts = _place_vertices(f, pts[i0], pts[i1], vals.ravel()[i0], vals.ravel()[i1], config)
    faces = inverse.reshape(-1, 3)
    # the table winds triangles clockwise seen from the high side; flip to outward-facing
    faces = faces[:, [0, 2, 1]]
    return TriMesh(verts, faces)


# marching squares: corners (0,0), (1,0), (1,1), (0,1); edges bottom, right, top, left
_SQ_CORNERS = np.array([(0, 0), (1, 0), (1, 1), (0, 1)])
_SQ_EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0)])


def _square_table():
    table = {}
    for case in range(16):
        if case in (0, 15, 5, 10):
            continue
        bits = [(case >> i) & 1 for i in range(4)]
        crossing = [e for e, (p, q) in enumerate(_SQ_EDGES) if bits[p] != bits[q]]
        table[case] = [tuple(crossing)]
    # saddles, keyed by (case, center_below)
    table[(5, True)] = [(0, 1), (2, 3)]
    table[(5, False)] = [(3, 0), (1, 2)]
    table[(10, True)] = [(3, 0), (1, 2)]
    table[(10, False)] = [(0, 1), (2, 3)]
    return table


_SQ_TABLE = _square_table()


def marching_squares(field, config: ExtractionConfig | None = None, domain: DomainBounds | None = None) -> Contour2D:
    """Oriented segments of the ``iso`` contour of a 2D field.

    Saddle cells are disambiguated by sampling the field at the cell center.
    Each segment keeps the low (inside) side on its left.
    """
    config = config or ExtractionConfig()
    domain = domain or DomainBounds.unit(2)
    res = config.validate(2)
    f = _as_scalar_fn(field)
    pts, vals = _sample_grid(f, res, domain)
    vals = np.where(vals == config.iso, config.iso + _NUDGE, vals)
    below = vals < config.iso
    cells = res - 1
    ci, cj = (g.ravel() for g in np.meshgrid(np.arange(cells[0]), np.arange(cells[1]), indexing="ij"))
    case = np.zeros(len(ci), dtype=np.int64)
    for b, (dx, dy) in enumerate(_SQ_CORNERS):
        case |= below[ci + dx, cj + dy].astype(np.int64) << b
    active = (case != 0) & (case != 15)
    ci, cj, case = ci[active], cj[active], case[active]
    if not len(case):
        return Contour2D(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64))

    saddle = (case == 5) | (case == 10)
    center_below = np.zeros(len(case), dtype=bool)
    if saddle.any():
        step = domain.extent / cells
        centers = domain.lo_arr + (np.stack([ci[saddle], cj[saddle]], -1) + 0.5) * step
        center_below[saddle] = f(centers) < config.iso

    seg_cell, seg_edges = [], []
    for idx, (c, cb) in enumerate(zip(case.tolist(), center_below.tolist())):
        for pair in _SQ_TABLE[(c, cb) if c in (5, 10) else c]:
            seg_cell.append(idx)
            seg_edges.append(pair)
    seg_cell = np.array(seg_cell)
    seg_edges = np.array(seg_edges)  # (S, 2) local edge ids

    cell_xy = np.stack([ci[seg_cell], cj[seg_cell]], -1)
    e = seg_edges.ravel()
    cxy = np.repeat(cell_xy, 2, axis=0)
    sa = _SQ_CORNERS[_SQ_EDGES[e, 0]] + cxy
    sb = _SQ_CORNERS[_SQ_EDGES[e, 1]] + cxy
    start = np.minimum(sa, sb)
    axis = np.argmax(np.abs(sb - sa), axis=1)
    key = np.ravel_multi_index(start.T, tuple(res)) * 2 + axis
    uniq, inverse = np.unique(key, return_inverse=True)
    u_start = np.stack(np.unravel_index(uniq // 2, tuple(res)), -1)
    u_end = u_start + np.eye(2, dtype=np.int64)[uniq % 2]
    i0 = np.ravel_multi_index(u_start.T, tuple(res))
    i1 = np.ravel_multi_index(u_end.T, tuple(res))
    verts = _place_vertices(f, pts[i0], pts[i1], vals.ravel()[i0], vals.ravel()[i1], config)
    segs = inverse.reshape(-1, 2)

    # orient: the field must increase toward the right-hand normal
    p, q = verts[segs[:, 0]], verts[segs[:, 1]]
    d = q - p
    right = np.stack([d[:, 1], -d[:, 0]], -1)
    cv = np.stack([vals[cell_xy[:, 0] + dx, cell_xy[:, 1] + dy] for dx, dy in _SQ_CORNERS], -1)
    step = domain.extent / cells
    mid = (0.5 * (p + q) - domain.lo_arr) / step - cell_xy  # local coords in [0, 1]^2
    tx, ty = mid[:, 0], mid[:, 1]
    gx = (1 - ty) * (cv[:, 1] - cv[:, 0]) + ty * (cv[:, 2] - cv[:, 3])
    gy = (1 - tx) * (cv[:, 3] - cv[:, 0]) + tx * (cv[:, 2] - cv[:, 1])
    flip = (right * np.stack([gx / step[0], gy / step[1]], -1)).sum(1) < 0
    segs[flip] = segs[flip][:, ::-1]
    return Contour2D(verts, segs)


def extract(field, config: ExtractionConfig | None = None, domain: DomainBounds | None = None):
    dim = domain.dim if domain is not None else getattr(field, "input_dim", None)
    if dim == 2:
        return marching_squares(field, config, domain)
    if dim == 3:
        return marching_cubes(field, config, domain)
    raise ValueError("extraction needs a 2D or 3D field")


def vertex_error(surface, oracle) -> dict | None:
    """Max and mean ``|oracle(v)|`` over emitted vertices; None when empty."""
    verts = surface.vertices
    if not len(verts):
        return None
    d = np.abs(np.asarray(oracle(verts), dtype=np.float64).reshape(len(verts), -1)[:, 0])
    return {"max": float(d.max()), "mean": float(d.mean()), "count": int(len(d))}
