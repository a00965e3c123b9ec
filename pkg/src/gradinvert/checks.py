"""Finite-difference gradient checks for every tape primitive.

Each case draws random inputs and builds ``op(inputs)``; the check compares
the tape gradient of ``<R, op(inputs)>`` (R random) against central
differences. The second-order variant differentiates ``<R2, grad>`` again,
which exercises the VJP rules of the nodes the backward pass itself emits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-6
GRAD_TOL = 1e-5
KINK_GAP = 1e-4


def numeric_gradient(f, x: np.ndarray, step: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, step scaled by max(1, |x_i|)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros(x.size)
    flat = x.reshape(-1)
    idx = range(x.size) if coords is None else coords
    for i in idx:
        h = step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _away_from(rng, shape, points, gap=KINK_GAP, low=-2.0, high=2.0):
    """N(0,1) samples kept at least ``gap`` away from every value in ``points``."""
    x = rng.standard_normal(shape)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap) * 10
    return np.clip(x, low, high) if low is not None else x


def _small_shape(rng, ndim, max_size=64):
    while True:
        shape = tuple(int(s) for s in rng.integers(1, 6, size=ndim))
        if np.prod(shape) <= max_size:
            return shape


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _nonzero(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# each case: rng -> (list of input arrays, builder(nodes) -> output node)


def _case_binary(op):
    def case(rng):
        shape = _small_shape(rng, 2)
        a = rng.standard_normal(shape)
        b = _nonzero(rng, shape) if op in (ad.div, ad.safe_div) else rng.standard_normal(shape)
        return [a, b], lambda n: op(n[0], n[1])

    return case


def _case_unary(op, sampler=None):
    def case(rng):
        shape = _small_shape(rng, 2)
        x = sampler(rng, shape) if sampler else rng.standard_normal(shape)
        return [x], lambda n: op(n[0])

    return case


def _case_scale(rng):
    c = float(rng.standard_normal())
    return [rng.standard_normal(_small_shape(rng, 3))], lambda n: ad.scale(n[0], c)


def _case_max_const(rng):
    c = float(rng.uniform(-1, 1))
    return [_away_from(rng, _small_shape(rng, 2), [c])], lambda n: ad.maximum(n[0], c)


def _case_step(rng):
    return [_away_from(rng, _small_shape(rng, 2), [0.0])], lambda n: ad.step(n[0]) * n[0]


def _case_sign(rng):
    return [_away_from(rng, _small_shape(rng, 2), [0.0])], lambda n: ad.sign(n[0]) * n[0]


def _case_matmul(rng):
    m, k, p = (int(v) for v in rng.integers(1, 7, size=3))
    return [rng.standard_normal((m, k)), rng.standard_normal((k, p))], lambda n: ad.matmul(n[0], n[1])


def _case_transpose(rng):
    return [rng.standard_normal(_small_shape(rng, 2))], lambda n: ad.transpose(n[0])


def _case_reshape(rng):
    shape = _small_shape(rng, 3)
    return [rng.standard_normal(shape)], lambda n: ad.reshape(n[0], (int(np.prod(shape)),))


def _case_broadcast(rng):
    shape = _small_shape(rng, 3, 48)
    small = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    return [rng.standard_normal(small)], lambda n: ad.broadcast_to(n[0], shape)


def _case_sum_to(rng):
    shape = _small_shape(rng, 3, 48)
    small = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    return [rng.standard_normal(shape)], lambda n: ad.sum_to(n[0], small)


def _case_inner(rng):
    shape = _small_shape(rng, 2)
    return [rng.standard_normal(shape), rng.standard_normal(shape)], lambda n: ad.inner(n[0], n[1])


def _case_sce(rng):
    k = int(rng.integers(2, 11))
    label = int(rng.integers(0, k))
    return [rng.standard_normal(k)], lambda n: ad.softmax_cross_entropy(n[0], label)


def _case_softmax(rng):
    return [rng.standard_normal(int(rng.integers(2, 11)))], lambda n: ad.softmax(n[0])


def _conv_geometry(rng):
    c, o = (int(v) for v in rng.integers(1, 3, size=2))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h = int(rng.integers(k, 6))
    w = int(rng.integers(k, 6))
    return c, o, k, stride, padding, h, w


def _case_conv2d(rng):
    c, o, k, s, p, h, w = _conv_geometry(rng)
    x, wt = rng.standard_normal((c, h, w)), rng.standard_normal((o, c, k, k))
    return [x, wt], lambda n: ad.conv2d(n[0], n[1], s, p)


def _case_conv2d_input_grad(rng):
    c, o, k, s, p, h, w = _conv_geometry(rng)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    gy, wt = rng.standard_normal((o, ho, wo)), rng.standard_normal((o, c, k, k))
    return [gy, wt], lambda n: ad.conv2d_input_grad(n[0], n[1], (h, w), s, p)


def _case_conv2d_weight_grad(rng):
    c, o, k, s, p, h, w = _conv_geometry(rng)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    x, gy = rng.standard_normal((c, h, w)), rng.standard_normal((o, ho, wo))
    return [x, gy], lambda n: ad.conv2d_weight_grad(n[0], n[1], (k, k), s, p)


def _case_slice(rng):
    shape = _small_shape(rng, 2)
    key = (slice(0, max(1, shape[0] - 1)), slice(min(1, shape[1] - 1), None))
    return [rng.standard_normal(shape)], lambda n: ad.take(n[0], key)


def _case_embed(rng):
    shape = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    key = (slice(1, None), slice(0, shape[1] - 1))
    inner_shape = (shape[0] - 1, shape[1] - 1)
    return [rng.standard_normal(inner_shape)], lambda n: ad.embed(n[0], shape, key)


def _case_concat(rng):
    parts = [rng.standard_normal(int(rng.integers(1, 9))) for _ in range(int(rng.integers(1, 4)))]
    return parts, lambda n: ad.concat(n)


PRIMITIVE_CASES = {
    "add": _case_binary(ad.add),
    "sub": _case_binary(ad.sub),
    "mul": _case_binary(ad.mul),
    "div": _case_binary(ad.div),
    "safe_div": _case_binary(ad.safe_div),
    "scale": _case_scale,
    "abs": _case_unary(ad.absolute, lambda rng, s: _away_from(rng, s, [0.0])),
    "sign": _case_sign,
    "square": _case_unary(ad.square),
    "sqrt": _case_unary(ad.sqrt, _positive),
    "exp": _case_unary(ad.exp),
    "relu": _case_unary(ad.relu, lambda rng, s: _away_from(rng, s, [0.0])),
    "step": _case_step,
    "max_const": _case_max_const,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "broadcast_to": _case_broadcast,
    "sum_to": _case_sum_to,
    "sum": _case_unary(ad.sum_all),
    "mean": _case_unary(ad.mean),
    "inner": _case_inner,
    "l2norm": _case_unary(ad.l2_norm),
    "softmax": _case_softmax,
    "sce": _case_sce,
    "conv2d": _case_conv2d,
    "conv2d_input_grad": _case_conv2d_input_grad,
    "conv2d_weight_grad": _case_conv2d_weight_grad,
    "slice": _case_slice,
    "embed": _case_embed,
    "concat": _case_concat,
}


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool


def check_primitive(name: str, rng, order: int = 1, tol: float = GRAD_TOL) -> CheckResult:
    inputs, build = PRIMITIVE_CASES[name](rng)
    graph = ad.Graph()
    nodes = [graph.input(x, name=f"in{i}") for i, x in enumerate(inputs)]
    out = build(nodes)
    f = ad.inner(graph.constant(rng.standard_normal(out.shape)), out)
    grads = ad.grad(f, nodes)
    if order == 2:
        probes = [graph.constant(rng.standard_normal(n.shape)) for n in nodes]
        s = graph.constant(0.0)
        for p, n in zip(probes, nodes):
            s = s + ad.inner(p, grads[n])
        f = s
        grads = ad.grad(f, nodes)
    values = list(inputs)
    bind = lambda: {n: v for n, v in zip(nodes, values)}
    graph.forward(bind())
    analytic = [np.array(grads[n].value) for n in nodes]
    worst = 0.0
    for i in range(len(nodes)):
        def f_of(xi, i=i):
            values[i] = xi
            graph.forward(bind(), outputs=[f])
            return float(f.value)

        numeric = numeric_gradient(f_of, inputs[i])
        values[i] = inputs[i]
        worst = max(worst, relative_error(analytic[i], numeric))
    return CheckResult(name, worst, bool(worst < tol))


def two_layer_double_backprop(rng, tol: float = 1e-4) -> CheckResult:
    """d/dx ||d loss/d params||^2 for a two-layer ReLU net vs central differences."""
    d, hdim, k = 6, 5, 4
    graph = ad.Graph()
    x = graph.input(rng.standard_normal((d, 1)), name="x")
    w1 = graph.constant(rng.standard_normal((hdim, d)))
    b1 = graph.constant(rng.standard_normal((hdim, 1)) * 0.1)
    w2 = graph.constant(rng.standard_normal((k, hdim)))
    h = ad.relu(ad.matmul(w1, x) + b1)
    logits = ad.reshape(ad.matmul(w2, h), (k,))
    loss = ad.softmax_cross_entropy(logits, int(rng.integers(0, k)))
    g = ad.grad(loss, [w1, b1, w2])
    f = ad.inner(g[w1], g[w1]) + ad.inner(g[b1], g[b1]) + ad.inner(g[w2], g[w2])
    dx = ad.grad(f, [x])[x]
    x0 = np.array(x.value)

    def f_of(v):
        graph.forward({x: v}, outputs=[f])
        return float(f.value)

    graph.forward({x: x0})
    analytic = np.array(dx.value)
    numeric = numeric_gradient(f_of, x0)
    err = relative_error(analytic, numeric)
    return CheckResult("two_layer_double_backprop", err, bool(err < tol))
