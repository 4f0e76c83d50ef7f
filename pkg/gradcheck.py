"""Central finite-difference checks of the tape's analytic gradients."""
import logging
from dataclasses import dataclass

import numpy as np

import tensor as T
from layers import (
    ConvBlock,
    Dense,
    GruCell,
    SmbBlock,
    avg_pool1d,
    conv1d_block,
    gru_layer,
    gru_step,
    smb_forward,
    use,
)
from model import SmateConfig, SmateModel, decode, encode, reconstruction_loss
from regularizer import regularize
from tensor import Parameter, Tape, Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradCheck:
    op: str
    build: object
    params: list


@dataclass
class CheckResult:
    op: str
    max_error: float
    checked: int
    passed: bool


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def numerical_gradient(evaluate, param: Parameter, indices, step=STEP):
    """Central differences of ``evaluate()`` w.r.t. ``param`` at ``indices``."""
    grads = np.zeros(len(indices))
    flat = param.value.reshape(-1)
    for n, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + step
        plus = evaluate()
        flat[i] = original - step
        minus = evaluate()
        flat[i] = original
        grads[n] = (plus - minus) / (2 * step)
    return grads


def check_gradients(check: GradCheck, rng, max_entries=12, step=STEP, tolerance=TOLERANCE):
    for p in check.params:
        p.zero_grad()
    tape = Tape()
    T.backward(tape, check.build(tape))
    evaluate = lambda: check.build(None).item()
    worst, count = 0.0, 0
    for p in check.params:
        size = p.value.size
        indices = np.arange(size) if size <= max_entries else rng.choice(size, max_entries, replace=False)
        numeric = numerical_gradient(evaluate, p, indices, step)
        analytic = p.grad.reshape(-1)[indices]
        errors = relative_error(analytic, numeric)
        worst = max(worst, float(errors.max(initial=0.0)))
        count += len(indices)
    result = CheckResult(check.op, worst, count, worst < tolerance)
    logger.debug("gradcheck %s: max error %.3e over %d entries", check.op, worst, count)
    return result


def _projection(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _project(out, weights):
    return T.sum(T.mul(out, weights))


def default_suite(rng):
    """One check per op kind, on small random instances."""
    checks = []

    a = Parameter("a", rng.standard_normal((3, 4)))
    b = Parameter("b", rng.standard_normal((4, 2)))
    r = _projection(rng, (3, 2))
    checks.append(GradCheck("matmul", lambda tape: _project(T.matmul(use(a, tape), use(b, tape)), r), [a, b]))

    u = Parameter("u", rng.uniform(0.5, 1.5, (2, 3)))
    v = Parameter("v", rng.uniform(0.5, 1.5, (2, 3)))
    r = _projection(rng, (2, 3))

    def elementwise(tape):
        x, y = use(u, tape), use(v, tape)
        out = T.add(T.mul(T.sigmoid(x), T.tanh(y)), T.div(T.relu(T.sub(x, T.scale(y, 0.1))), y))
        return _project(T.add(out, T.log(x)), r)

    checks.append(GradCheck("elementwise", elementwise, [u, v]))

    cell = GruCell("gru", 3, 4, rng)
    x_t = Parameter("x_t", rng.standard_normal((2, 3)))
    h0 = Parameter("h_prev", rng.standard_normal((2, 4)))
    r = _projection(rng, (2, 4))
    checks.append(GradCheck(
        "gru_step",
        lambda tape: _project(gru_step(cell, use(x_t, tape), use(h0, tape), tape), r),
        cell.parameters() + [x_t, h0],
    ))

    layer = GruCell("gru_layer", 3, 4, rng)
    seq = Parameter("seq", rng.standard_normal((2, 5, 3)))
    r = _projection(rng, (2, 5, 4))
    checks.append(GradCheck(
        "gru_layer", lambda tape: _project(gru_layer(layer, use(seq, tape), tape), r), layer.parameters() + [seq]
    ))

    block = ConvBlock("conv", 3, 4, 3, rng)
    block.bn_gamma.value = rng.uniform(0.5, 1.5, 4)
    block.bn_beta.value = rng.uniform(0.5, 1.0, 4)
    conv_in = Parameter("conv_in", rng.standard_normal((2, 6, 3)))
    r = _projection(rng, (2, 6, 4))
    checks.append(GradCheck(
        "conv1d_block",
        lambda tape: _project(conv1d_block(block, use(conv_in, tape), True, tape), r),
        block.parameters() + [conv_in],
    ))

    bn_in = Parameter("bn_in", rng.standard_normal((2, 5, 3)))
    gamma = Parameter("gamma", rng.uniform(0.5, 1.5, 3))
    beta = Parameter("beta", rng.standard_normal(3))
    r = _projection(rng, (2, 5, 3))
    checks.append(GradCheck(
        "batch_norm",
        lambda tape: _project(T.batch_norm(use(bn_in, tape), use(gamma, tape), use(beta, tape), 1e-5), r),
        [bn_in, gamma, beta],
    ))

    pool_in = Parameter("pool_in", rng.standard_normal((2, 7, 3)))
    r = _projection(rng, (2, 3, 3))
    checks.append(GradCheck("avg_pool1d", lambda tape: _project(avg_pool1d(use(pool_in, tape), 3), r), [pool_in]))

    smb = SmbBlock("smb", 4, 3, rng)
    smb_in = Parameter("smb_in", rng.standard_normal((2, 6, 4)))
    r = _projection(rng, (2, 6, 4))
    checks.append(GradCheck(
        "smb", lambda tape: _project(smb_forward(smb, use(smb_in, tape), tape)[0], r), smb.parameters() + [smb_in]
    ))

    dense = Dense("fc", 4, 3, rng)
    fc_in = Parameter("fc_in", rng.standard_normal((5, 4)))
    r = _projection(rng, (5, 3))
    checks.append(GradCheck("fc", lambda tape: _project(dense(use(fc_in, tape), "sigmoid", tape), r), dense.parameters() + [fc_in]))

    target = Tensor(rng.standard_normal((2, 5, 3)))
    recon = Parameter("x_hat", rng.standard_normal((2, 5, 3)))
    checks.append(GradCheck("reconstruction_loss", lambda tape: reconstruction_loss(target, use(recon, tape)), [recon]))

    embeddings = Parameter("embeddings", rng.standard_normal((8, 2, 3)))
    classes = np.array([0, 1, 2, 0, 1, -1, -1, -1])

    def reg_loss(tape):
        return regularize(use(embeddings, tape), classes, classes >= 0, ["a", "b", "c"])[1]

    checks.append(GradCheck("regularization_loss", reg_loss, [embeddings]))
    return checks


def end_to_end_check(rng, n_params=10, lam=1.0):
    """Joint loss of a tiny two-sample model w.r.t. randomly chosen scalars."""
    config = SmateConfig(T=6, M=2, gru_dim=3, conv_filters=3, embed_dim=2, pool=2, lam=lam, seed=int(rng.integers(1 << 30)))
    model = SmateModel(config)
    x = Tensor(rng.standard_normal((2, 6, 2)))
    classes = np.array([0, 1])

    def build(tape):
        h = encode(model, x, training=True, tape=tape)
        total = reconstruction_loss(x, decode(model, h, tape))
        reg = regularize(h, classes, classes >= 0, ["a", "b"])[1]
        return T.add(total, T.scale(reg, lam))

    params = model.parameters()
    chosen = [params[i] for i in rng.choice(len(params), n_params, replace=False)]
    return GradCheck("end_to_end", build, chosen)


def run_suite(checks, rng, tolerance=TOLERANCE, max_entries=12):
    return [check_gradients(c, rng, max_entries=max_entries, tolerance=tolerance) for c in checks]
