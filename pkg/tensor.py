"""Dense float64 tensors and a define-by-run reverse-mode tape.

Every op takes ``Tensor`` arguments and returns a new ``Tensor``. When any
argument belongs to a ``Tape`` the op is recorded on it together with a
pure forward function (used by ``Tape.replay``) and a backward rule.
Tensors without a tape are evaluated eagerly and nothing is recorded,
which is how frozen models run inference.

Binary ops never broadcast. Shape adaptation goes through the explicit
``reshape``, ``broadcast``, ``take``, ``concat`` and ``stack`` ops.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class SmateError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SmateError):
    pass


class ContractError(SmateError):
    pass


class ConfigurationError(SmateError):
    pass


class TrainingAborted(SmateError):
    pass


class NumericalError(SmateError):
    pass


def _shape_str(shape):
    return "(" + ", ".join(str(s) for s in shape) + ")"


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient of {self.name} has shape {_shape_str(self.grad.shape)}, "
                f"value has {_shape_str(self.value.shape)}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    forward: Optional[Callable] = None
    backward: Optional[Callable] = None
    param: Optional[Parameter] = None


class _Scatter:
    """Sparse gradient contribution: ``grad[index] += value``."""

    __slots__ = ("index", "value", "unique")

    def __init__(self, index, value, unique):
        self.index = index
        self.value = value
        self.unique = unique


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: dict[int, np.ndarray] = {}
        self._watched: dict[int, "Tensor"] = {}

    def __len__(self):
        return len(self.nodes)

    def _add(self, node, value):
        node_id = len(self.nodes)
        if any(i >= node_id for i in node.inputs):
            raise ContractError(f"node {node.op} references a later node")
        self.nodes.append(node)
        self.outputs[node_id] = value
        return Tensor(value, self, node_id)

    def constant(self, value):
        if isinstance(value, Tensor):
            value = value.data
        return self._add(Node("const", ()), np.asarray(value, dtype=DTYPE))

    def watch(self, param: Parameter):
        """Leaf tensor for ``param``; watching twice returns the same node."""
        key = id(param)
        if key not in self._watched:
            self._watched[key] = self._add(Node("param", (), param=param), param.value)
        return self._watched[key]

    def node_of(self, tensor):
        if tensor.tape is self:
            return tensor.node
        if tensor.tape is not None:
            raise ContractError("tensor belongs to a different tape")
        return self.constant(tensor.data).node

    def replay(self):
        """Recompute every node from the recorded leaf values."""
        values = {}
        for node_id, node in enumerate(self.nodes):
            if node.forward is None:
                values[node_id] = self.outputs[node_id]
            else:
                values[node_id] = node.forward(*(values[i] for i in node.inputs))
        return values


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {_shape_str(self.shape)}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={_shape_str(self.shape)}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op, forward, backward, *inputs):
    inputs = tuple(as_tensor(t) for t in inputs)
    out = forward(*(t.data for t in inputs))
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ContractError(f"{op} mixes tensors from different tapes")
    tape = next(iter(tapes.values()))
    ids = tuple(tape.node_of(t) for t in inputs)
    return tape._add(Node(op, ids, forward, backward), out)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {_shape_str(a.shape)} and {_shape_str(b.shape)} differ")


# Elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", np.add, lambda g, out, x, y: (g, g), a, b)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", np.subtract, lambda g, out, x, y: (g, -g), a, b)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _record("mul", np.multiply, lambda g, out, x, y: (g * y, g * x), a, b)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    return _record(
        "div", np.divide, lambda g, out, x, y: (g / y, -g * x / (y * y)), a, b
    )


def scale(a, factor):
    factor = float(factor)
    return _record(
        "scale", lambda x: factor * x, lambda g, out, x: (factor * g,), a
    )


def shift(a, offset):
    """Adds a scalar constant."""
    offset = float(offset)
    return _record("shift", lambda x: x + offset, lambda g, out, x: (g,), a)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _record("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),), a)


def tanh(a):
    return _record("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)


def relu(a):
    return _record(
        "relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),), a
    )


def log(a):
    return _record("log", np.log, lambda g, out, x: (g / x,), a)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "scale": scale,
    "shift": shift,
}


def elementwise(op, *args):
    """Dispatches ``op`` by name, e.g. ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# Linear algebra

def matmul(a, b):
    """``a[..., q] @ b[q, r]``; leading axes of ``a`` are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"matmul: shapes {_shape_str(a.shape)} and {_shape_str(b.shape)} do not align"
        )

    def backward(g, out, x, y):
        gx = g @ y.T
        gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gy

    return _record("matmul", np.matmul, backward, a, b)


def bias_add(x, b):
    """Adds vector ``b`` to every row along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"bias_add: shapes {_shape_str(x.shape)} and {_shape_str(b.shape)} do not align"
        )
    return _record(
        "bias_add",
        np.add,
        lambda g, out, u, v: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)),
        x,
        b,
    )


def time_linear(matrix, x):
    """Applies a constant ``R x T`` matrix along the time axis (-2) of ``x``.

    Pooling, windowed means, upsampling and 'same' convolution shifts are all
    expressed as such fixed matrices.
    """
    matrix = np.asarray(matrix, dtype=DTYPE)
    x = as_tensor(x)
    if x.ndim < 2 or matrix.ndim != 2 or matrix.shape[1] != x.shape[-2]:
        raise DimensionError(
            f"time_linear: matrix {_shape_str(matrix.shape)} cannot act on {_shape_str(x.shape)}"
        )
    return _record(
        "time_linear",
        lambda u: np.matmul(matrix, u),
        lambda g, out, u: (np.matmul(matrix.T, g),),
        x,
    )


# Reductions

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g, out, u):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, u.shape).copy(),)

    return _record(
        "sum", lambda u: np.sum(u, axis=axis, keepdims=keepdims), backward, x
    )


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise ContractError(f"mean over an empty axis of shape {_shape_str(x.shape)}")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    x = as_tensor(x)

    def backward(g, out, u):
        g = np.expand_dims(g, axis)
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * u / safe, 0.0),)

    return _record(
        "norm", lambda u: np.sqrt(np.sum(u * u, axis=axis)), backward, x
    )


# Shape ops

def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    return _record(
        "reshape",
        lambda u: u.reshape(shape),
        lambda g, out, u: (g.reshape(u.shape),),
        x,
    )


def broadcast(x, shape):
    """Explicit tiling of singleton axes of ``x`` up to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape) or any(
        s != t and s != 1 for s, t in zip(x.shape, shape)
    ):
        raise DimensionError(
            f"broadcast: cannot tile {_shape_str(x.shape)} to {_shape_str(shape)}"
        )
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    return _record(
        "broadcast",
        lambda u: np.broadcast_to(u, shape).copy(),
        lambda g, out, u: (g.sum(axis=axes, keepdims=True),),
        x,
    )


def take(x, index, axis=0):
    """Selects ``index`` (int or integer array) along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if isinstance(index, (int, np.integer)):
        index = int(index)
        unique = True
    else:
        index = np.asarray(index, dtype=np.intp)
        unique = len(np.unique(index)) == len(index)
    key = (slice(None),) * axis + (index,)

    return _record(
        "take",
        lambda u: u[key],
        lambda g, out, u: (_Scatter(key, g, unique),),
        x,
    )


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        rest = [s for i, s in enumerate(t.shape) if i != axis]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or rest != ref:
            raise DimensionError(
                f"concat: shapes {_shape_str(tensors[0].shape)} and {_shape_str(t.shape)} differ off axis {axis}"
            )
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    return _record(
        "concat",
        lambda *us: np.concatenate(us, axis=axis),
        lambda g, out, *us: tuple(np.split(g, cuts, axis=axis)),
        *tensors,
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)

    def backward(g, out, *us):
        return tuple(np.take(g, i, axis=axis) for i in range(len(us)))

    return _record("stack", lambda *us: np.stack(us, axis=axis), backward, *tensors)


# Normalization

def batch_norm(x, gamma, beta, eps):
    """Normalizes every channel (last axis) over all other axes."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise DimensionError(
            f"batch_norm: channels {x.shape[-1]} vs gamma {_shape_str(gamma.shape)}"
        )
    axes = tuple(range(x.ndim - 1))

    def forward(u, gm, bt):
        mu = u.mean(axis=axes)
        var = u.var(axis=axes)
        return (u - mu) / np.sqrt(var + eps) * gm + bt

    def backward(g, out, u, gm, bt):
        n = u.size // u.shape[-1]
        mu = u.mean(axis=axes)
        var = u.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (u - mu) * inv
        g2 = g.reshape(-1, g.shape[-1])
        xh2 = xhat.reshape(-1, xhat.shape[-1])
        d_gamma = (g2 * xh2).sum(axis=0)
        d_beta = g2.sum(axis=0)
        gx = g * gm
        gx2 = gx.reshape(-1, gx.shape[-1])
        dx = inv / n * (n * gx - gx2.sum(axis=0) - xhat * (gx2 * xh2).sum(axis=0))
        return dx, d_gamma, d_beta

    return _record("batch_norm", forward, backward, x, gamma, beta)


def channel_affine(x, gamma, beta, mean_, var, eps):
    """Batch norm with fixed statistics (inference mode)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=DTYPE) + eps)
    mean_ = np.asarray(mean_, dtype=DTYPE)

    def backward(g, out, u, gm, bt):
        xhat = (u - mean_) * inv
        g2 = g.reshape(-1, g.shape[-1])
        return g * gm * inv, (g2 * xhat.reshape(g2.shape)).sum(axis=0), g2.sum(axis=0)

    return _record(
        "channel_affine",
        lambda u, gm, bt: (u - mean_) * inv * gm + bt,
        backward,
        x,
        gamma,
        beta,
    )


# Reverse pass

def _accumulate(grads, owned, node_id, contribution, shape):
    if isinstance(contribution, _Scatter):
        buf = grads.get(node_id)
        if buf is None:
            buf = np.zeros(shape, dtype=DTYPE)
        elif node_id not in owned:
            buf = buf.copy()
        if contribution.unique:
            buf[contribution.index] += contribution.value
        else:
            np.add.at(buf, contribution.index, contribution.value)
        grads[node_id] = buf
        owned.add(node_id)
    elif node_id in grads:
        grads[node_id] = grads[node_id] + contribution
        owned.add(node_id)
    else:
        grads[node_id] = contribution
        owned.discard(node_id)


def backward(tape: Tape, loss: Tensor):
    """Accumulates d(loss)/d(param) into ``param.grad`` for every watched param."""
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {_shape_str(loss.shape)}")
    grads = {loss.node: np.ones_like(tape.outputs[loss.node])}
    owned = set()
    for node_id in range(loss.node, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.param is not None:
            node.param.grad = node.param.grad + g
            continue
        if node.backward is None:
            continue
        inputs = [tape.outputs[i] for i in node.inputs]
        contributions = node.backward(g, tape.outputs[node_id], *inputs)
        for input_id, value, c in zip(node.inputs, inputs, contributions):
            if c is not None:
                _accumulate(grads, owned, input_id, c, value.shape)


# Optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, t=1):
    """One Adam update, in place. All gradients are checked before any update."""
    if lr <= 0 or eps <= 0:
        raise ContractError("lr and eps must be positive")
    if t < 1:
        raise ContractError(f"Adam step counter must be >= 1, got {t}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingAborted(f"non-finite gradient in parameter {p.name!r} at step {t}")
    beta1, beta2 = betas
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * (p.grad * p.grad)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


class Adam:
    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        adam_step(self.params, self.state, self.lr, self.betas, self.eps, self.t)
