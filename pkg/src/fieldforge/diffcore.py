"""Reverse-mode autodiff over a flat parameter vector, plus Adam.

Nodes hold numpy arrays, so one tape node covers a whole batch. Every
trainable quantity (MLP weights, grid cells, alpha cells) lives in a single
:class:`ParamStore`; a backward pass deposits gradients into ``store.grads``.
"""

from __future__ import annotations

import builtins
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ParamStore",
    "Tape",
    "Node",
    "AdamState",
    "adam_step",
    "grad_check",
    "NonFiniteError",
    "save_checkpoint",
    "load_checkpoint",
]


class NonFiniteError(FloatingPointError):
    """A NaN appeared on the tape or a non-finite gradient reached Adam."""

    def __init__(self, message: str, node_id: int | None = None, block: str | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.block = block


class ParamStore:
    """Flat parameter vector with named, disjoint segments."""

    def __init__(self):
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self.segments: dict[str, tuple[int, tuple[int, ...]]] = {}

    def register(self, name: str, init: np.ndarray) -> str:
        if name in self.segments:
            raise KeyError(f"parameter block {name!r} already registered")
        init = np.asarray(init, dtype=np.float64)
        start = self.values.size
        self.segments[name] = (start, init.shape)
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.zeros_like(self.values)
        return name

    def span(self, name: str) -> slice:
        start, shape = self.segments[name]
        return slice(start, start + int(np.prod(shape, dtype=np.int64)))

    def shape(self, name: str) -> tuple[int, ...]:
        return self.segments[name][1]

    def get(self, name: str) -> np.ndarray:
        """A reshaped *view* into the flat vector."""
        return self.values[self.span(name)].reshape(self.shape(name))

    def set(self, name: str, value) -> None:
        self.values[self.span(name)] = np.broadcast_to(
            np.asarray(value, dtype=np.float64), self.shape(name)
        ).ravel()

    def grad(self, name: str) -> np.ndarray:
        return self.grads[self.span(name)].reshape(self.shape(name))

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def names(self) -> list[str]:
        return list(self.segments)

    def block_of(self, index: int) -> str:
        for name in self.segments:
            s = self.span(name)
            if s.start <= index < s.stop:
                return name
        raise IndexError(index)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.values = self.values.copy()
        other.grads = self.grads.copy()
        other.segments = dict(self.segments)
        return other

    def __len__(self) -> int:
        return self.values.size


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("tape", "id", "value", "parents", "op", "param")

    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, id_, value, parents, op, param=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.parents = parents
        self.op = op
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Records array-valued operations for one reverse sweep.

    ``check_nan`` raises :class:`NonFiniteError` carrying the offending node
    id as soon as a NaN value is recorded.
    """

    def __init__(self, params: ParamStore | None = None, check_nan: bool = True):
        self.params = params
        self.nodes: list[Node] = []
        self.check_nan = check_nan
        self.visits = 0

    def record(self, value, parents: Sequence[tuple[Node, Callable]] = (), op: str = "custom") -> Node:
        """Append a node. ``parents`` pairs each input node with its VJP."""
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), value, tuple(parents), op)
        if self.check_nan and np.isnan(value).any():
            raise NonFiniteError(f"NaN produced by op {op!r} at node {node.id}", node_id=node.id)
        self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        if self.params is None:
            raise ValueError("tape has no ParamStore")
        node = self.record(self.params.get(name).copy(), (), op="param")
        node.param = name
        return node

    def const(self, value) -> Node:
        return self.record(value, (), op="const")

    def backward(self, out: Node) -> float:
        """Reverse sweep from scalar ``out``; returns its value."""
        if out.tape is not self:
            raise ValueError("node belongs to another tape")
        if out.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
        grads: list[np.ndarray | None] = [None] * (out.id + 1)
        grads[out.id] = np.ones_like(out.value)
        self.visits = 0
        for node in reversed(self.nodes[: out.id + 1]):
            self.visits += 1
            g = grads[node.id]
            if g is None:
                continue
            if node.param is not None:
                self.params.grads[self.params.span(node.param)] += g.ravel()
                continue
            for parent, vjp in node.parents:
                pg = _unbroadcast(np.asarray(vjp(g)), parent.value.shape)
                if grads[parent.id] is None:
                    grads[parent.id] = pg
                else:
                    grads[parent.id] = grads[parent.id] + pg
        return float(out.value.reshape(()))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unary(x: Node, value, vjp, op):
    return x.tape.record(value, [(x, vjp)], op=op)


def _binary(a, b, value, vjp_a, vjp_b, op):
    tape = _tape_of(a, b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, vjp_a))
    if isinstance(b, Node):
        parents.append((b, vjp_b))
    return tape.record(value, parents, op=op)


def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g, "add")


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv, "div")


def neg(x: Node):
    return _unary(x, -x.value, lambda g: -g, "neg")


def abs(x: Node):  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.value)  # abs'(0) = 0
    return _unary(x, np.abs(x.value), lambda g: g * s, "abs")


def square(x: Node):
    v = x.value
    return _unary(x, v * v, lambda g: 2.0 * g * v, "square")


def sqrt(x: Node):
    out = np.sqrt(x.value)
    return _unary(x, out, lambda g: 0.5 * g / out, "sqrt")


def exp(x: Node):
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out, "exp")


def sin(x: Node):
    v = x.value
    return _unary(x, np.sin(v), lambda g: g * np.cos(v), "sin")


def cos(x: Node):
    v = x.value
    return _unary(x, np.cos(v), lambda g: -g * np.sin(v), "cos")


def relu(x: Node):
    """max(x, 0), with derivative 0 at the kink."""
    mask = x.value > 0
    return _unary(x, np.where(mask, x.value, 0.0), lambda g: g * mask, "relu")


def minimum(a, b):
    av, bv = _val(a), _val(b)
    pick_a = av <= bv
    out = np.where(pick_a, av, bv)
    return _binary(a, b, out, lambda g: g * pick_a, lambda g: g * ~pick_a, "min")


def dot(a, b):
    """Inner product along the last axis."""
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, (av * bv).sum(-1), lambda g: g[..., None] * bv, lambda g: g[..., None] * av, "dot"
    )


def sum(x: Node, axis=None):  # noqa: A001
    shape = x.value.shape
    if axis is None:
        return _unary(x, x.value.sum(), lambda g: np.broadcast_to(g, shape), "sum")
    return _unary(
        x, x.value.sum(axis=axis), lambda g: np.broadcast_to(np.expand_dims(g, axis), shape), "sum"
    )


def mean(x: Node, axis=None):
    n = x.value.size if axis is None else x.value.shape[axis]
    return div(sum(x, axis), float(n))


def affine(x, w: Node, b: Node | None = None):
    """Row-batched ``x @ w + b``; ``x`` may be a constant array."""
    xv, wv = _val(x), _val(w)
    out = xv @ wv
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g: g @ wv.T))
    parents.append((w, lambda g: xv.T @ g))
    if b is not None:
        out = out + b.value
        parents.append((b, lambda g: g.sum(axis=0)))
    return w.tape.record(out, parents, op="affine")


def gather_weighted(table: Node, index: np.ndarray, weights):
    """``out[n] = sum_k weights[n, k] * table[index[n, k]]`` for a (T, F) table.

    ``index`` is an integer constant; ``weights`` may be a constant
    (fixed interpolation weights) or a Node.
    """
    tv = table.value
    index = np.asarray(index)
    wv = _val(weights)
    gathered = tv[index]  # (N, K, F)
    out = np.einsum("nk,nkf->nf", wv, gathered)
    n_rows, n_feat = tv.shape
    flat_index = index.ravel()

    def vjp_table(g):
        contrib = wv[:, :, None] * g[:, None, :]  # (N, K, F)
        slots = (flat_index[:, None] * n_feat + np.arange(n_feat)).ravel()
        return np.bincount(slots, weights=contrib.ravel(), minlength=n_rows * n_feat).reshape(n_rows, n_feat)

    parents = [(table, vjp_table)]
    if isinstance(weights, Node):
        parents.append((weights, lambda g: np.einsum("nf,nkf->nk", g, gathered)))
    return table.tape.record(out, parents, op="gather")


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Node):
            lo, hi = bounds[i], bounds[i + 1]
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(lo, hi)
            parents.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _tape_of(*xs).record(out, parents, op="concat")


def reshape(x: Node, shape):
    old = x.value.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old), "reshape")


def getitem(x: Node, key):
    shape = x.value.shape

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return out

    return _unary(x, x.value[key], vjp, "getitem")


def where(mask: np.ndarray, a, b):
    """Elementwise select with a constant mask."""
    mask = np.asarray(mask, dtype=bool)
    return _binary(
        a, b, np.where(mask, _val(a), _val(b)), lambda g: g * mask, lambda g: g * ~mask, "where"
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

_MAX_STEPS = 2**53


@dataclass
class AdamState:
    """Adam moments and hyperparameters.

    ``block_lr`` maps a block-name prefix to its own learning rate; the
    longest matching prefix wins, everything else uses ``lr``.
    """

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    block_lr: dict[str, float] = field(default_factory=dict)
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        self._lr_vec = None

    def lr_vector(self, params: ParamStore) -> np.ndarray | float:
        if not self.block_lr:
            return self.lr
        if self._lr_vec is None or self._lr_vec.size != len(params):
            vec = np.full(len(params), self.lr)
            for name in params.names():
                matches = [p for p in self.block_lr if name.startswith(p)]
                if matches:
                    vec[params.span(name)] = self.block_lr[max(matches, key=len)]
            self._lr_vec = vec
        return self._lr_vec


def adam_step(params: ParamStore, state: AdamState, lr_scale: float = 1.0) -> None:
    """One bias-corrected Adam update in place; zeroes the gradients."""
    g = params.grads
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        block = params.block_of(bad)
        raise NonFiniteError(f"non-finite gradient in parameter block {block!r}", block=block)
    if state.t >= _MAX_STEPS:
        raise OverflowError("Adam step counter overflow")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    np.multiply(g, g, out=g)
    state.v *= b2
    state.v += (1.0 - b2) * g
    # update = lr * m_hat / (sqrt(v_hat) + eps), computed in the grad buffer
    np.multiply(state.v, 1.0 / (1.0 - b2**state.t), out=g)
    np.sqrt(g, out=g)
    g += state.eps
    np.divide(state.m, g, out=g)
    g *= lr_scale / (1.0 - b1**state.t)
    g *= state.lr_vector(params)
    params.values -= g
    params.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def grad_check(
    builder: Callable[[Tape, ParamStore], Node],
    params: ParamStore,
    h: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Max over parameters of ``|analytic - central FD| / max(1, |analytic|)``.

    ``builder`` must construct the same loss deterministically each call.
    ``indices`` restricts the FD sweep (all parameters by default).
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    params.zero_grad()
    tape = Tape(params)
    tape.backward(builder(tape, params))
    analytic = params.grads.copy()
    params.zero_grad()

    def loss_value() -> float:
        return float(builder(Tape(params), params).value.reshape(()))

    idx = range(len(params)) if indices is None else indices
    worst = 0.0
    for i in idx:
        saved = params.values[i]
        params.values[i] = saved + h
        up = loss_value()
        params.values[i] = saved - h
        down = loss_value()
        params.values[i] = saved
        fd = (up - down) / (2.0 * h)
        worst = max(worst, builtins.abs(analytic[i] - fd) / max(1.0, builtins.abs(analytic[i])))
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"FFLD"
_VERSION = 1


def save_checkpoint(params: ParamStore, path) -> None:
    """Little-endian: magic, u32 version, u32 block count, then per block
    u16 name length, UTF-8 name, u64 element count, f32 values."""
    names = params.names()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            vals = params.get(name).astype("<f4").ravel()
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", vals.size))
            fh.write(vals.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into ``{block name: flat float32 array}``."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a fieldforge checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        blocks[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).copy()
        pos += 4 * size
    return blocks


def restore_checkpoint(params: ParamStore, blocks: dict[str, np.ndarray]) -> None:
    for name, vals in blocks.items():
        if name not in params.segments:
            raise KeyError(f"checkpoint block {name!r} not present in the parameter store")
        params.set(name, vals.reshape(params.shape(name)))
