import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldforge import diffcore as dc


def _scalar_store(name="x", value=3.0):
    ps = dc.ParamStore()
    ps.register(name, np.array([value]))
    return ps


def test_square_loss_and_grad():
    ps = _scalar_store(value=3.0)
    tape = dc.Tape(ps)
    loss = tape.backward(dc.sum(dc.square(tape.param("x"))))
    assert loss == 9.0
    assert ps.grad("x")[0] == 6.0


def test_sin_at_zero():
    ps = _scalar_store(value=0.0)
    tape = dc.Tape(ps)
    loss = tape.backward(dc.sum(dc.sin(tape.param("x"))))
    assert loss == 0.0
    assert ps.grad("x")[0] == 1.0


def _mlp_store(rng, n_in=3, hidden=8, activation=dc.relu):
    ps = dc.ParamStore()
    ps.register("l0.w", rng.normal(size=(n_in, hidden)))
    ps.register("l0.b", rng.normal(size=hidden) * 0.1)
    ps.register("l1.w", rng.normal(size=(hidden, 1)))
    ps.register("l1.b", rng.normal(size=1))
    x = rng.normal(size=(5, n_in))
    y = rng.normal(size=(5, 1))

    def build(tape, _ps):
        h = activation(dc.affine(x, tape.param("l0.w"), tape.param("l0.b")))
        out = dc.affine(h, tape.param("l1.w"), tape.param("l1.b"))
        return dc.mean(dc.square(out - y))

    return ps, build


def test_mlp_grads_match_finite_differences():
    ps, build = _mlp_store(np.random.default_rng(0))
    assert dc.grad_check(build, ps, h=1e-4) < 1e-4


def test_sine_mlp_grad_check():
    ps, build = _mlp_store(np.random.default_rng(1), activation=dc.sin)
    assert dc.grad_check(build, ps, h=1e-4) < 1e-4


def test_quadratic_grad_check_is_tight():
    ps = dc.ParamStore()
    ps.register("a", np.array([0.3, -1.2, 2.0]))
    target = np.array([1.0, 2.0, 3.0])

    def build(tape, _):
        return dc.sum(dc.square(tape.param("a") - target))

    assert dc.grad_check(build, ps, h=1e-3) < 1e-8


def test_unreachable_parameter_gets_exact_zero():
    ps = dc.ParamStore()
    ps.register("used", np.array([1.5]))
    ps.register("unused", np.array([2.5]))
    tape = dc.Tape(ps)
    tape.param("unused")  # on the tape, but not reachable from the loss
    tape.backward(dc.sum(dc.exp(tape.param("used"))))
    assert ps.grad("unused")[0] == 0.0
    assert ps.grad("used")[0] == pytest.approx(np.exp(1.5))


def test_gradients_accumulate_across_uses():
    ps = _scalar_store(value=2.0)
    tape = dc.Tape(ps)
    p = tape.param("x")
    tape.backward(dc.sum(p * p + p))
    assert ps.grad("x")[0] == 5.0


def test_backward_visits_each_node_once():
    ps, build = _mlp_store(np.random.default_rng(2))
    tape = dc.Tape(ps)
    out = build(tape, ps)
    tape.backward(out)
    assert tape.visits == len(tape.nodes)


def test_non_scalar_output_rejected():
    ps = _scalar_store()
    tape = dc.Tape(ps)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(dc.concat([tape.param("x"), tape.param("x")]))


def test_nan_is_reported_with_node_id():
    ps = _scalar_store(value=-1.0)
    tape = dc.Tape(ps)
    with pytest.raises(dc.NonFiniteError) as info:
        dc.sqrt(tape.param("x"))
    assert info.value.node_id == 1


def test_subgradient_conventions_at_zero():
    ps = dc.ParamStore()
    ps.register("z", np.zeros(2))
    tape = dc.Tape(ps)
    z = tape.param("z")
    tape.backward(dc.sum(dc.abs(z)) + dc.sum(dc.relu(z)))
    assert np.array_equal(ps.grad("z"), np.zeros(2))


# every primitive against central differences on random inputs

_UNARY = {
    "neg": (dc.neg, None),
    "abs": (dc.abs, None),
    "square": (dc.square, None),
    "sqrt": (dc.sqrt, "positive"),
    "exp": (dc.exp, None),
    "sin": (dc.sin, None),
    "cos": (dc.cos, None),
    "relu": (dc.relu, None),
    "sum0": (lambda x: dc.sum(x, axis=0), None),
    "mean1": (lambda x: dc.mean(x, axis=1), None),
    "reshape": (lambda x: dc.reshape(x, (-1,)), None),
    "getitem": (lambda x: x[1:3], None),
    "fancy": (lambda x: dc.getitem(x, np.array([0, 0, 2])), None),
    "where": (lambda x: dc.where(np.array([[True], [False], [True], [False]]), x, x * 3.0), None),
}

_BINARY = {
    "add": dc.add,
    "sub": dc.sub,
    "mul": dc.mul,
    "div": dc.div,
    "minimum": dc.minimum,
    "dot": lambda a, b: dc.dot(dc.reshape(a, (-1,)), dc.reshape(b, (-1,))),
    "concat": lambda a, b: dc.concat([a, b], axis=0),
    "affine": lambda a, b: dc.affine(a, dc.reshape(b, (3, 4))[:, :2]),
}


def _fd_error(build, ps):
    return dc.grad_check(build, ps, h=1e-6)


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_primitives_match_fd(name):
    op, domain = _UNARY[name]
    weights = np.random.default_rng(99).normal(size=(4, 3))
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        x = rng.normal(size=(4, 3))
        if domain == "positive":
            x = np.abs(x) + 0.5
        else:
            x = np.where(np.abs(x) < 1e-3, 0.1, x)  # keep away from kinks
        ps = dc.ParamStore()
        ps.register("x", x)

        def build(tape, _):
            out = op(tape.param("x"))
            w = weights.ravel()[: out.value.size].reshape(out.value.shape)
            return dc.sum(out * w)

        worst = max(worst, _fd_error(build, ps))
    assert worst < 1e-4


@pytest.mark.parametrize("name", sorted(_BINARY))
def test_binary_primitives_match_fd(name):
    op = _BINARY[name]
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(4, 3))
        if name == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if name == "minimum":
            b = np.where(np.abs(a - b) < 1e-3, b + 0.1, b)
        ps = dc.ParamStore()
        ps.register("a", a)
        ps.register("b", b)
        weights = rng.normal(size=64)

        def build(tape, _):
            out = op(tape.param("a"), tape.param("b"))
            return dc.sum(out * weights[: out.value.size].reshape(out.value.shape))

        worst = max(worst, _fd_error(build, ps))
    assert worst < 1e-4


def test_gather_weighted_matches_fd_in_table_and_weights():
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        ps = dc.ParamStore()
        ps.register("table", rng.normal(size=(6, 2)))
        ps.register("w", rng.random((5, 4)))
        index = rng.integers(0, 6, (5, 4))

        def build(tape, _):
            out = dc.gather_weighted(tape.param("table"), index, tape.param("w"))
            return dc.sum(dc.square(out))

        worst = max(worst, dc.grad_check(build, ps, h=1e-6))
    assert worst < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_polynomial_grad_property(xs):
    ps = dc.ParamStore()
    ps.register("x", np.array(xs))
    tape = dc.Tape(ps)
    x = tape.param("x")
    tape.backward(dc.sum(x * x * x))
    assert np.allclose(ps.grad("x"), 3 * np.array(xs) ** 2)


# Adam


def test_adam_first_step_is_minus_lr_sign():
    ps = _scalar_store(value=0.0)
    ps.grads[:] = 1.0
    state = dc.AdamState(len(ps))
    dc.adam_step(ps, state)
    assert abs(ps.values[0] + 1e-3) < 1e-6
    assert state.t == 1
    assert np.all(ps.grads == 0.0)


def test_adam_zero_gradient_is_fixed_point():
    ps = dc.ParamStore()
    ps.register("w", np.array([0.5, -2.0, 3.0]))
    before = ps.values.copy()
    state = dc.AdamState(len(ps))
    for _ in range(5):
        dc.adam_step(ps, state)
    assert np.array_equal(ps.values, before)
    assert state.t == 5


def test_adam_defaults():
    state = dc.AdamState(3)
    assert (state.lr, state.beta1, state.beta2, state.eps) == (1e-3, 0.9, 0.999, 1e-8)
    assert np.all(state.m == 0) and np.all(state.v == 0) and state.t == 0


def _trajectory(seed):
    ps, build = _mlp_store(np.random.default_rng(seed))
    state = dc.AdamState(len(ps), lr=1e-2)
    traj = []
    for _ in range(100):
        tape = dc.Tape(ps)
        traj.append(tape.backward(build(tape, ps)))
        dc.adam_step(ps, state)
        traj.append(ps.values.copy())
    return traj


def test_adam_runs_are_bitwise_deterministic():
    a, b = _trajectory(4), _trajectory(4)
    for x, y in zip(a, b):
        assert np.array_equal(np.asarray(x), np.asarray(y))


def test_adam_non_finite_gradient_names_block():
    ps = dc.ParamStore()
    ps.register("good", np.zeros(2))
    ps.register("mlp.layer1.w", np.zeros(3))
    ps.grads[3] = np.inf
    with pytest.raises(dc.NonFiniteError, match="mlp.layer1.w"):
        dc.adam_step(ps, dc.AdamState(len(ps)))


def test_adam_step_counter_overflow():
    ps = _scalar_store()
    state = dc.AdamState(len(ps), t=2**53)
    with pytest.raises(OverflowError):
        dc.adam_step(ps, state)


def test_adam_block_learning_rates():
    ps = dc.ParamStore()
    ps.register("field.hash.level0", np.zeros(1))
    ps.register("field.mlp.layer0.w", np.zeros(1))
    ps.grads[:] = 1.0
    dc.adam_step(ps, dc.AdamState(len(ps), lr=1e-3, block_lr={"field.hash": 1e-2}))
    assert ps.values == pytest.approx([-1e-2, -1e-3], abs=1e-7)


# checkpoints


def test_checkpoint_layout_and_round_trip(tmp_path):
    ps = dc.ParamStore()
    ps.register("alpha_grid", np.arange(4.0).reshape(4, 1))
    ps.register("w", np.array([[0.5, -1.0]]))
    path = tmp_path / "p.ffld"
    dc.save_checkpoint(ps, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FFLD"
    assert struct.unpack_from("<II", raw, 4) == (1, 2)
    (n,) = struct.unpack_from("<H", raw, 12)
    assert raw[14 : 14 + n] == b"alpha_grid"
    assert struct.unpack_from("<Q", raw, 14 + n) == (4,)
    blocks = dc.load_checkpoint(path)
    assert blocks["alpha_grid"].dtype == np.float32
    other = dc.ParamStore()
    other.register("alpha_grid", np.zeros((4, 1)))
    other.register("w", np.zeros((1, 2)))
    dc.restore_checkpoint(other, blocks)
    assert np.array_equal(other.values, ps.values)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ffld"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="checkpoint"):
        dc.load_checkpoint(path)


def test_param_store_segments_are_disjoint():
    ps = dc.ParamStore()
    ps.register("a", np.zeros((2, 3)))
    ps.register("b", np.zeros(4))
    assert ps.span("a") == slice(0, 6) and ps.span("b") == slice(6, 10)
    assert len(ps.values) == len(ps.grads) == 10
    with pytest.raises(KeyError):
        ps.register("a", np.zeros(1))
