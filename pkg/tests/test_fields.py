import math

import numpy as np
import pytest

from fieldforge import diffcore as dc
from fieldforge.domain import DomainBounds
from fieldforge.extract import ExtractionConfig, marching_cubes
from fieldforge.fields import (Field, FieldConfig, FourierConfig, GridConfig, HashgridConfig, MlpConfig, UnsupportedArchitecture,
                               build_field, fourier_encode, geometric_init, grid_indices, corner_bits,
                               multilinear_lookup, spatial_gradient_fd)


class AnalyticField(Field):
    """Test helper: a closed-form field built from tape ops."""

    def __init__(self, fn, dim=1, domain=None):
        super().__init__(FieldConfig(input_dim=dim, kind="plain_mlp"), dc.ParamStore(), domain)
        self.fn = fn

    def _query(self, tape, x):
        return self.fn(x if isinstance(x, dc.Node) else tape.const(x))


def test_fourier_single_frequency_at_zero():
    assert np.allclose(fourier_encode(np.zeros((1, 1)), 1, include_raw=False), [[0.0, 1.0]])


def test_fourier_zero_frequencies_is_identity():
    x = np.array([[0.37]])
    assert np.array_equal(fourier_encode(x, 0, include_raw=True), x)


def test_fourier_feature_count():
    assert fourier_encode(np.zeros((3, 2)), 6, include_raw=True).shape == (3, 26)


def test_fourier_feature_values():
    x = np.array([[0.1, -0.4]])
    feats = fourier_encode(x, 3, include_raw=False)
    expected = [f(2**k * math.pi * x[0, j]) for k in range(3) for j in range(2) for f in (math.sin, math.cos)]
    assert sorted(np.round(feats[0], 12)) == sorted(np.round(expected, 12))


def _hash_field(dim=2, **hg):
    cfg = FieldConfig(input_dim=dim, kind="hashgrid_mlp", mlp=MlpConfig(hidden_width=8, depth=1),
                      hashgrid=HashgridConfig(**({"levels": 3, "base_resolution": 4, "max_resolution": 16,
                                                  "table_size_log2": 6} | hg)))
    ps = dc.ParamStore()
    return build_field(cfg, ps, rng=np.random.default_rng(0)), ps


def test_hashgrid_vertex_query_returns_table_entry():
    f, ps = _hash_field()
    name, res, size = f.levels[1]
    table = ps.get(name)
    table[:] = np.random.default_rng(3).normal(size=table.shape)
    vertex = np.array([[3, 5]])
    u = vertex / res
    feats = multilinear_lookup(dc.Tape(ps).param(name), u, res, size).value
    idx = grid_indices(vertex, np.array([res, res]), size)
    assert np.allclose(feats[0], table[idx[0]], atol=1e-12)


def test_hashgrid_zero_table_gives_zero_features():
    f, ps = _hash_field()
    for name, _, _ in f.levels:
        ps.set(name, 0.0)
    x = np.random.default_rng(0).random((20, 2))
    assert np.array_equal(f.encode(dc.Tape(ps), x).value, np.zeros((20, 6)))


def test_hashgrid_encoding_length():
    f, ps = _hash_field(dim=3, levels=4, features_per_level=3)
    assert f.encode(dc.Tape(ps), np.full((2, 3), 0.3)).value.shape == (2, 12)


def test_hashgrid_resolutions_are_geometric():
    res = HashgridConfig(levels=8, base_resolution=16, max_resolution=256).resolutions()
    assert res[0] == 16 and res[-1] == 256
    ratios = np.array(res[1:]) / np.array(res[:-1])
    assert np.allclose(ratios, 16 ** (1 / 7), atol=0.05)


def test_hashgrid_hashed_and_dense_levels():
    f, _ = _hash_field(levels=2, base_resolution=4, max_resolution=16, table_size_log2=6)
    # (4+1)^2 = 25 <= 64 dense, (16+1)^2 = 289 > 64 hashed
    assert f.levels[0][2] is None and f.levels[1][2] == 64


def test_hash_index_matches_reference():
    rng = np.random.default_rng(0)
    corners = rng.integers(0, 100, (50, 3))
    idx = grid_indices(corners, np.array([99, 99, 99]), 2**10)
    primes = [1, 2654435761, 805459861]
    for c, i in zip(corners, idx):
        h = 0
        for j in range(3):
            h ^= (int(c[j]) * primes[j]) & (2**64 - 1)
        assert i == h % 2**10


def test_hashgrid_table_gradient_equals_weight():
    f, ps = _hash_field()
    name, res, size = f.levels[0]
    u = np.array([[0.3, 0.55]])
    tape = dc.Tape(ps)
    out = multilinear_lookup(tape.param(name), u, res, size)
    tape.backward(dc.sum(out[:, 0:1]))
    g = ps.grad(name)[:, 0]
    base = np.floor(u[0] * res).astype(int)
    frac = u[0] * res - base
    for bits in corner_bits(2):
        w = np.prod(np.where(bits == 1, frac, 1 - frac))
        row = grid_indices((base + bits)[None], np.array([res, res]), size)[0]
        assert g[row] == pytest.approx(w)


def test_multilinear_is_affine_along_edges():
    ps = dc.ParamStore()
    ps.register("t", np.random.default_rng(1).normal(size=(9, 1)))
    tape = dc.Tape(ps)
    a = multilinear_lookup(tape.param("t"), np.array([[0.0, 0.5]]), 2).value[0, 0]
    b = multilinear_lookup(tape.param("t"), np.array([[0.5, 0.5]]), 2).value[0, 0]
    for t in (0.0, 0.25, 0.5, 1.0):
        v = multilinear_lookup(tape.param("t"), np.array([[0.5 * t, 0.5]]), 2).value[0, 0]
        assert v == pytest.approx(a + t * (b - a), abs=1e-12)


def _relu_grid(values, relu=True, dim=1):
    cfg = FieldConfig(input_dim=dim, kind="relu_grid", grid=GridConfig(resolution=[len(values)], relu=relu))
    ps = dc.ParamStore()
    f = build_field(cfg, ps)
    ps.set(f.name, np.asarray(values, dtype=float).reshape(-1, 1))
    return f, ps


def test_relu_grid_corner_value():
    f, _ = _relu_grid([-1.0, 3.0])
    assert f(np.array([[0.0], [1.0]]))[:, 0].tolist() == [0.0, 3.0]


def test_relu_grid_edge_midpoint():
    f, _ = _relu_grid([0.0, 2.0])
    assert f(np.array([[0.5]]))[0, 0] == 1.0


def test_relu_after_interpolation_not_before():
    f, _ = _relu_grid([-2.0, 0.0])
    assert f(np.array([[0.5]]))[0, 0] == 0.0
    g, _ = _relu_grid([-2.0, 2.0], relu=True)
    assert g(np.array([[0.75]]))[0, 0] == 1.0


def test_relu_grid_clamps_out_of_domain():
    f, _ = _relu_grid([1.0, 2.0, 5.0])
    assert f(np.array([[-3.0], [7.0]]))[:, 0].tolist() == [1.0, 5.0]


def test_plain_mlp_zero_weights_gives_zero():
    cfg = FieldConfig(input_dim=3, kind="plain_mlp")
    ps = dc.ParamStore()
    f = build_field(cfg, ps)
    ps.values[:] = 0.0
    assert np.array_equal(f(np.random.default_rng(0).random((7, 3))), np.zeros((7, 1)))


@pytest.mark.parametrize("kind", ["plain_mlp", "fourier_mlp", "hashgrid_mlp", "relu_grid"])
def test_queries_are_deterministic(kind):
    cfg = FieldConfig(input_dim=2, kind=kind, grid=GridConfig(resolution=[5], relu=False))
    ps = dc.ParamStore()
    f = build_field(cfg, ps, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).random((10, 2))
    assert np.array_equal(f(x), f(x))


def test_hashgrid_output_responds_to_one_touched_entry():
    f, ps = _hash_field()
    x = np.array([[0.41, 0.73]])
    before = f(x)[0, 0]
    name, res, size = f.levels[-1]
    tape = dc.Tape(ps)
    out = dc.sum(f.query(tape, x))
    tape.backward(out)
    touched = np.flatnonzero(np.abs(ps.grad(name)).sum(1))
    ps.zero_grad()
    ps.get(name)[touched[0]] += 0.5
    assert f(x)[0, 0] != before


def test_dimension_mismatch_raises():
    f, _ = _hash_field(dim=2)
    with pytest.raises(ValueError, match="shape"):
        f(np.zeros((3, 3)))


@pytest.mark.parametrize("kind", ["plain_mlp", "fourier_mlp", "hashgrid_mlp", "relu_grid"])
def test_parameter_gradients_for_every_representation(kind):
    cfg = FieldConfig(input_dim=2, kind=kind, mlp=MlpConfig(hidden_width=6, depth=2),
                      hashgrid=HashgridConfig(levels=2, base_resolution=2, max_resolution=4, table_size_log2=4),
                      fourier=FourierConfig(2),
                      grid=GridConfig(resolution=[3], relu=False))
    ps = dc.ParamStore()
    f = build_field(cfg, ps, rng=np.random.default_rng(0))
    if kind == "relu_grid":
        ps.values[:] = np.random.default_rng(2).normal(size=len(ps))
    x = np.random.default_rng(1).random((8, 2))

    def build(tape, _):
        return dc.mean(dc.square(f.query(tape, x) - 0.3))

    idx = np.random.default_rng(3).choice(len(ps), size=min(len(ps), 150), replace=False)
    assert dc.grad_check(build, ps, h=1e-5, indices=idx) < 1e-3


def test_fd_gradient_of_linear_field_is_exact():
    a = np.array([0.7, -1.3])
    f = AnalyticField(lambda x: dc.reshape(dc.affine(x, dc.Tape().const(a.reshape(2, 1))) , (-1, 1)), dim=2,
                      domain=DomainBounds((-5, -5), (5, 5)))
    x = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    for h in (1e-3, 0.1, 0.5):
        g = spatial_gradient_fd(f, dc.Tape(), x, h)
        assert np.allclose(g[:, 0, :].value if isinstance(g, dc.Node) else g[:, 0, :], a, atol=1e-12)


def test_fd_gradient_of_constant_field_is_zero():
    f = AnalyticField(lambda x: x * 0.0 + 4.0, dim=1)
    g = spatial_gradient_fd(f, dc.Tape(), np.array([[0.2], [0.9]]), 1e-2)
    assert np.array_equal(g.value, np.zeros((2, 1, 1)))


def test_fd_gradient_of_sine():
    f = AnalyticField(lambda x: dc.sin(x * (2 * math.pi)), dim=1, domain=DomainBounds((-1,), (1,)))
    g = spatial_gradient_fd(f, dc.Tape(), np.array([[0.0]]), 1e-3).value[0, 0, 0]
    assert abs(g - 2 * math.pi) / (2 * math.pi) < 1e-3


def test_fd_shared_offset_shifts_whole_stencil():
    f = AnalyticField(lambda x: dc.square(x), dim=1, domain=DomainBounds((-5,), (5,)))
    x = np.array([[0.3]])
    g = spatial_gradient_fd(f, dc.Tape(), x, 1e-3, shared_offset=np.array([[0.2]])).value[0, 0, 0]
    assert g == pytest.approx(2 * 0.5, abs=1e-9)


def test_relu_grid_fd_matches_analytic_trilinear_gradient():
    rng = np.random.default_rng(0)
    cfg = FieldConfig(input_dim=3, kind="relu_grid", grid=GridConfig(resolution=[4], relu=True))
    ps = dc.ParamStore()
    f = build_field(cfg, ps)
    ps.set(f.name, rng.uniform(0.5, 2.0, (64, 1)))  # positive: away from the ReLU kink
    cell = 1.0 / 3
    checked = 0
    for _ in range(50):
        x = rng.random((1, 3))
        frac = (x[0] / cell) % 1.0
        if np.any(np.minimum(frac, 1 - frac) < 0.05):
            continue
        base = np.floor(x[0] / cell).astype(int)
        t = frac
        vals = ps.get(f.name)[:, 0]
        analytic = np.zeros(3)
        for bits in corner_bits(3):
            row = grid_indices((base + bits)[None], np.array([3, 3, 3]), None)[0]
            for j in range(3):
                w = 1.0
                for k in range(3):
                    if k == j:
                        w *= (1.0 if bits[k] else -1.0) / cell
                    else:
                        w *= t[k] if bits[k] else 1 - t[k]
                analytic[j] += w * vals[row]
        g = spatial_gradient_fd(f, dc.Tape(ps), x, 1e-4).value[0, 0]
        assert np.allclose(g, analytic, atol=1e-6)
        checked += 1
    assert checked > 5


def _geo_field(dim=3, kind="hashgrid_mlp"):
    cfg = FieldConfig(input_dim=dim, kind=kind)
    ps = dc.ParamStore()
    f = build_field(cfg, ps, rng=np.random.default_rng(0))
    return f, ps


@pytest.mark.parametrize("kind", ["plain_mlp", "fourier_mlp", "hashgrid_mlp"])
def test_geometric_init_signs(kind):
    f, _ = _geo_field(kind=kind)
    geometric_init(f, rng=np.random.default_rng(0))
    center = f(np.full((1, 3), 0.5))[0, 0]
    corner = f(np.zeros((1, 3)))[0, 0]
    assert center < 0 < corner


def test_geometric_init_zero_crossing_on_ray():
    f, _ = _geo_field()
    geometric_init(f, rng=np.random.default_rng(1))
    lo, hi = 0.0, 1.0  # parameter along center -> corner
    ray = lambda t: f(np.full((1, 3), 0.5 * (1 - t)))[0, 0]
    assert ray(lo) < 0 < ray(hi)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ray(mid) < 0 else (lo, mid)
    radius = 0.5 * math.sqrt(3) * lo
    assert radius == pytest.approx(0.1, abs=0.03)


def test_geometric_init_default_bias():
    import inspect
    assert inspect.signature(geometric_init).parameters["bias"].default == 0.1


def test_geometric_init_surface_is_sphere_like():
    f, _ = _geo_field()
    geometric_init(f, rng=np.random.default_rng(0))
    mesh = marching_cubes(f, ExtractionConfig(48))
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2
    assert np.linalg.norm(mesh.vertices.mean(0) - 0.5) < 0.1


def test_geometric_init_rejects_relu_grid_and_sine():
    f, _ = _geo_field(kind="relu_grid")
    with pytest.raises(UnsupportedArchitecture):
        geometric_init(f)
    cfg = FieldConfig(input_dim=2, kind="plain_mlp", mlp=MlpConfig(activation="sine"))
    with pytest.raises(UnsupportedArchitecture):
        geometric_init(build_field(cfg, dc.ParamStore()))


def test_config_validation():
    with pytest.raises(ValueError, match="input_dim"):
        FieldConfig(input_dim=4).validate()
    with pytest.raises(ValueError, match="levels"):
        FieldConfig(hashgrid=HashgridConfig(levels=0)).validate()
    with pytest.raises(ValueError, match="resolution"):
        FieldConfig(grid=GridConfig(resolution=[1])).validate()
