"""Neural building blocks of the encoder and decoder.

Layers own their ``Parameter`` objects and expose plain forward
functions. Every forward takes an optional ``tape``: with a tape the
parameters are watched and the computation is recorded for ``backward``,
without one the same code evaluates eagerly.

Inputs are ``(..., T, d)`` arrays; leading axes are batch axes.
"""
import logging
from functools import lru_cache

import numpy as np

import tensor as T
from tensor import ContractError, DimensionError, Parameter, Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

ACTIVATIONS = {
    "none": lambda x: x,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
}


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def use(param: Parameter, tape=None):
    """Tensor view of ``param``: watched on ``tape`` or a detached constant."""
    if tape is None:
        return Tensor(param.value)
    return tape.watch(param)


# Fixed time-axis matrices. Cached arrays are read-only.

def _frozen(matrix):
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=256)
def pool_matrix(length, pool):
    """Non-overlapping window means; the ragged tail averages its valid rows."""
    if pool < 1:
        raise ContractError(f"pool size must be >= 1, got {pool}")
    rows = -(-length // pool)
    matrix = np.zeros((rows, length))
    for row in range(rows):
        start, stop = row * pool, min((row + 1) * pool, length)
        matrix[row, start:stop] = 1.0 / (stop - start)
    return _frozen(matrix)


@lru_cache(maxsize=256)
def window_matrix(length, window):
    """Centered moving average over [i - m//2, i + m//2], truncated at the edges."""
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    half = window // 2
    matrix = np.zeros((length, length))
    for i in range(length):
        start, stop = max(0, i - half), min(length, i + half + 1)
        matrix[i, start:stop] = 1.0 / (stop - start)
    return _frozen(matrix)


@lru_cache(maxsize=256)
def shift_matrix(length, offset):
    """``(S @ x)[t] = x[t + offset]``, zero outside the sequence."""
    return _frozen(np.eye(length, k=offset))


@lru_cache(maxsize=256)
def repeat_matrix(length, pool):
    """Upsampling: row t copies embedding row t // pool."""
    rows = -(-length // pool)
    matrix = np.zeros((length, rows))
    matrix[np.arange(length), np.arange(length) // pool] = 1.0
    return _frozen(matrix)


class Dense:
    def __init__(self, name, d_in, d_out, rng):
        self.name = name
        self.W = Parameter(f"{name}.W", glorot(rng, (d_in, d_out), d_in, d_out))
        self.b = Parameter(f"{name}.b", np.zeros(d_out))

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x, activation="none", tape=None):
        return fc(use(self.W, tape), use(self.b, tape), x, activation)


def fc(W, b, x, activation="none"):
    """Row-wise affine map ``x @ W + b`` followed by ``activation``."""
    W, x = T.as_tensor(W), T.as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"fc: input width {x.shape[-1]} does not match weight rows {W.shape[0]}"
        )
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ContractError(f"unknown activation {activation!r}") from None
    return act(T.bias_add(T.matmul(x, W), b))


class GruCell:
    GATES = ("r", "z", "h")

    def __init__(self, name, d_in, d_g, rng):
        if d_g < 1:
            raise ContractError(f"{name}: GRU width must be positive")
        self.name = name
        self.d_in = d_in
        self.d_g = d_g
        self.W = {g: Parameter(f"{name}.W_{g}", glorot(rng, (d_in, d_g), d_in, d_g)) for g in self.GATES}
        self.U = {g: Parameter(f"{name}.U_{g}", glorot(rng, (d_g, d_g), d_g, d_g)) for g in self.GATES}
        self.b = {g: Parameter(f"{name}.b_{g}", np.zeros(d_g)) for g in self.GATES}

    def parameters(self):
        params = []
        for g in self.GATES:
            params += [self.W[g], self.U[g], self.b[g]]
        return params


def _gru_update(U, b, xr, xz, xh, h_prev):
    r = T.sigmoid(T.bias_add(T.add(xr, T.matmul(h_prev, U["r"])), b["r"]))
    z = T.sigmoid(T.bias_add(T.add(xz, T.matmul(h_prev, U["z"])), b["z"]))
    candidate = T.tanh(T.bias_add(T.add(xh, T.matmul(T.mul(h_prev, r), U["h"])), b["h"]))
    keep = T.sub(Tensor(np.ones(z.shape)), z)
    return T.add(T.mul(keep, h_prev), T.mul(z, candidate))


def _cell_tensors(cell, tape):
    U = {g: use(cell.U[g], tape) for g in cell.GATES}
    b = {g: use(cell.b[g], tape) for g in cell.GATES}
    W = {g: use(cell.W[g], tape) for g in cell.GATES}
    return W, U, b


def gru_step(cell: GruCell, x_t, h_prev, tape=None):
    """One GRU update; ``x_t`` is ``(..., d_in)``, ``h_prev`` is ``(..., d_g)``."""
    x_t, h_prev = T.as_tensor(x_t), T.as_tensor(h_prev)
    if x_t.shape[-1] != cell.d_in or h_prev.shape[-1] != cell.d_g:
        raise DimensionError(
            f"{cell.name}: expected inputs (..., {cell.d_in}) and (..., {cell.d_g}), "
            f"got {x_t.shape} and {h_prev.shape}"
        )
    W, U, b = _cell_tensors(cell, tape)
    projections = [T.matmul(x_t, W[g]) for g in cell.GATES]
    return _gru_update(U, b, *projections, h_prev)


def gru_layer(cell: GruCell, seq, tape=None):
    """Runs ``cell`` over the time axis from a zero state; returns all states."""
    seq = T.as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise ContractError(f"{cell.name}: empty sequence")
    if seq.shape[-1] != cell.d_in:
        raise DimensionError(f"{cell.name}: input width {seq.shape[-1]}, expected {cell.d_in}")
    W, U, b = _cell_tensors(cell, tape)
    projections = [T.matmul(seq, W[g]) for g in cell.GATES]
    h = Tensor(np.zeros(seq.shape[:-2] + (cell.d_g,)))
    states = []
    for t in range(seq.shape[-2]):
        xr, xz, xh = (T.take(p, t, axis=-2) for p in projections)
        h = _gru_update(U, b, xr, xz, xh, h)
        states.append(h)
    return T.stack(states, axis=-2)


class ConvBlock:
    def __init__(self, name, d_in, d_c, window, rng, eps=BN_EPS, momentum=BN_MOMENTUM):
        if window < 1:
            raise ContractError(f"{name}: kernel window must be >= 1")
        self.name = name
        self.d_in = d_in
        self.d_c = d_c
        self.window = window
        fan_in, fan_out = window * d_in, window * d_c
        self.kernel = Parameter(f"{name}.kernel", glorot(rng, (window, d_in, d_c), fan_in, fan_out))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_c))
        self.bn_gamma = Parameter(f"{name}.bn_gamma", np.ones(d_c))
        self.bn_beta = Parameter(f"{name}.bn_beta", np.zeros(d_c))
        self.running_mean = np.zeros(d_c)
        self.running_var = np.ones(d_c)
        self.eps = eps
        self.momentum = momentum

    def parameters(self):
        return [self.kernel, self.bias, self.bn_gamma, self.bn_beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


def conv1d(kernel, bias, seq):
    """Zero-padded 'same' convolution: ``out[t] = sum_k seq[t + k - (m-1)//2] @ kernel[k] + bias``."""
    kernel, seq = T.as_tensor(kernel), T.as_tensor(seq)
    window, d_in, _ = kernel.shape
    if seq.shape[-1] != d_in:
        raise DimensionError(f"conv1d: input width {seq.shape[-1]}, kernel expects {d_in}")
    length = seq.shape[-2]
    left = (window - 1) // 2
    out = None
    for k in range(window):
        shifted = T.time_linear(shift_matrix(length, k - left), seq)
        term = T.matmul(shifted, T.take(kernel, k, axis=0))
        out = term if out is None else T.add(out, term)
    return T.bias_add(out, bias)


def conv1d_block(block: ConvBlock, seq, training=False, tape=None):
    """ReLU(BN(conv1d(seq))); training mode uses and records batch statistics."""
    conv = conv1d(use(block.kernel, tape), use(block.bias, tape), seq)
    gamma, beta = use(block.bn_gamma, tape), use(block.bn_beta, tape)
    if training:
        axes = tuple(range(conv.ndim - 1))
        batch_mean = conv.data.mean(axis=axes)
        batch_var = conv.data.var(axis=axes)
        block.running_mean[:] = block.momentum * block.running_mean + (1 - block.momentum) * batch_mean
        block.running_var[:] = block.momentum * block.running_var + (1 - block.momentum) * batch_var
        normalized = T.batch_norm(conv, gamma, beta, block.eps)
    else:
        normalized = T.channel_affine(conv, gamma, beta, block.running_mean, block.running_var, block.eps)
    return T.relu(normalized)


def avg_pool1d(seq, pool):
    """Non-overlapping average pooling over time; output length ceil(T / pool)."""
    seq = T.as_tensor(seq)
    return T.time_linear(pool_matrix(seq.shape[-2], pool), seq)


class SmbBlock:
    def __init__(self, name, d, window, rng, reduction=None):
        if window < 1:
            raise ContractError(f"{name}: SMB window must be >= 1")
        self.name = name
        self.d = d
        self.window = window
        self.reduction = reduction or max(1, d // 4)
        self.fc_down = Dense(f"{name}.fc_down", d, self.reduction, rng)
        self.fc_up = Dense(f"{name}.fc_up", self.reduction, d, rng)

    def parameters(self):
        return self.fc_down.parameters() + self.fc_up.parameters()


def smb_forward(block: SmbBlock, h, tape=None):
    """Spatial Modeling Block. Returns ``(h * s, s)`` with s in (0, 1)."""
    h = T.as_tensor(h)
    if block.window < 1:
        raise ContractError(f"{block.name}: SMB window must be >= 1")
    if h.shape[-1] != block.d:
        raise DimensionError(f"{block.name}: input width {h.shape[-1]}, expected {block.d}")
    s_h = T.time_linear(window_matrix(h.shape[-2], block.window), h)
    s_v = block.fc_down(s_h, "relu", tape)
    s = block.fc_up(s_v, "sigmoid", tape)
    return T.mul(h, s), s
