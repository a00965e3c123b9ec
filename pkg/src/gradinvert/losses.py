"""Reconstruction losses: gradient matching, TV, activation matching, style.

Every loss accepts either graph nodes (and then returns a node, so the loss
stays differentiable) or plain arrays (and then returns a float).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import Model, ModelSpec, ParamStore, apply, conv_trace_indices


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    s_g: float = 10.0
    s_a: float = 1.0
    s_s: float = 10000.0
    alpha_tv: float = 1e-6
    # trace position -> weight; positions not listed weigh 1
    layer_weights: dict = field(default_factory=dict)
    # None means every (C, H, W) activation
    style_layers: tuple | None = None

    def __post_init__(self):
        for name in ("s_g", "s_a", "s_s", "alpha_tv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{name} must be finite and >= 0, got {v}")
        for j, w in self.layer_weights.items():
            if not math.isfinite(w) or w < 0:
                raise LossError(f"layer weight for layer {j} must be finite and >= 0, got {w}")

    @property
    def uses_prior(self) -> bool:
        return self.s_a > 0 or self.s_s > 0

    @classmethod
    def gradient_only(cls, alpha_tv: float = 1e-6) -> "LossWeights":
        return cls(s_g=1.0, s_a=0.0, s_s=0.0, alpha_tv=alpha_tv)


def _numeric(fn):
    """Let a node-level loss of two tensor (or trace) arguments run on arrays."""

    def wrapper(a, b, *rest, **kwargs):
        if _has_node(a) or _has_node(b):
            return fn(a, b, *rest, **kwargs)
        graph = ad.Graph()
        return float(fn(_lift(graph, a), _lift(graph, b), *rest, **kwargs).value)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _has_node(a):
    if isinstance(a, (list, tuple)):
        return any(isinstance(v, ad.Node) for _, v in a)
    return isinstance(a, ad.Node)


def _lift(graph, a):
    if isinstance(a, (list, tuple)):
        return [(j, graph.constant(v)) for j, v in a]
    return graph.constant(a)


@_numeric
def gradient_cosine_loss(g_target, g_candidate):
    """``1 - cos(g_target, g_candidate)``; a zero candidate gives exactly 1."""
    if g_target.shape != g_candidate.shape:
        raise LossError(f"gradient lengths differ: {g_target.shape} vs {g_candidate.shape}")
    norms = ad.l2_norm(g_target) * ad.l2_norm(g_candidate)
    return 1.0 - ad.safe_div(ad.inner(g_target, g_candidate), norms)


def total_variation(image):
    """Anisotropic TV: summed absolute differences of vertical and horizontal neighbours."""
    if not isinstance(image, ad.Node):
        return float(total_variation(ad.Graph().constant(image)).value)
    if image.value.ndim != 3:
        raise LossError(f"expected a (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    total = image.graph.constant(0.0)
    if h > 1:
        dv = ad.take(image, (slice(None), slice(1, None))) - ad.take(image, (slice(None), slice(None, -1)))
        total = total + ad.absolute(dv).sum()
    if w > 1:
        dh = ad.take(image, (slice(None), slice(None), slice(1, None))) - ad.take(
            image, (slice(None), slice(None), slice(None, -1))
        )
        total = total + ad.absolute(dh).sum()
    return total


def _check_traces(cand, prior):
    if len(cand) != len(prior):
        raise LossError(f"trace lengths differ: {len(cand)} vs {len(prior)}")
    for (j, a), (k, b) in zip(cand, prior):
        if j != k or a.shape != b.shape:
            raise LossError(f"layer {j}: activation shape {a.shape} does not match prior {b.shape}")


@_numeric
def activation_match_loss(trace_cand, trace_prior, layer_weights=None):
    """Sum over layers of weight * mean absolute activation difference."""
    _check_traces(trace_cand, trace_prior)
    layer_weights = layer_weights or {}
    graph = trace_cand[0][1].graph
    total = graph.constant(0.0)
    for (j, a), (_, b) in zip(trace_cand, trace_prior):
        w = layer_weights.get(j, 1.0)
        if w == 0:
            continue
        total = total + ad.mean(ad.absolute(a - b)) * w
    return total


def gram_matrix(activation):
    """Channel Gram matrix normalized by C*H*W.

    Accepts a (C, H, W) node or array.
    """
    if not isinstance(activation, ad.Node):
        graph = ad.Graph()
        return np.array(gram_matrix(graph.constant(activation)).value)
    if activation.value.ndim != 3:
        raise LossError(f"expected a (C, H, W) activation, got shape {activation.shape}")
    c, h, w = activation.shape
    flat = ad.reshape(activation, (c, h * w))
    return (flat @ ad.transpose(flat)) * (1.0 / (c * h * w))


@_numeric
def style_loss(trace_cand, trace_prior, style_layers=None):
    """Summed squared Frobenius distance between candidate and prior Gram matrices."""
    _check_traces(trace_cand, trace_prior)
    by_index = {j: (a, b) for (j, a), (_, b) in zip(trace_cand, trace_prior)}
    if style_layers is None:
        style_layers = [j for j, (a, _) in by_index.items() if a.value.ndim == 3]
    graph = trace_cand[0][1].graph
    total = graph.constant(0.0)
    for j in style_layers:
        if j not in by_index:
            raise LossError(f"style layer {j} does not exist (trace has {len(by_index)} layers)")
        a, b = by_index[j]
        total = total + ad.square(gram_matrix(a) - gram_matrix(b)).sum()
    return total


@dataclass
class Objective:
    """The reconstruction loss as a reusable graph over a candidate image."""

    graph: ad.Graph
    x: ad.Node
    total: ad.Node
    components: dict
    gradient: ad.Node
    candidate_grad_norm: ad.Node

    def evaluate(self, image, with_gradient=True):
        outputs = [self.total, self.candidate_grad_norm, *self.components.values()]
        if with_gradient:
            outputs.append(self.gradient)
        self.graph.forward({self.x: image}, outputs=outputs)
        comps = {k: float(n.value) for k, n in self.components.items()}
        comps["zero_grad"] = float(self.candidate_grad_norm.value) == 0.0
        grad = np.array(self.gradient.value) if with_gradient else None
        return float(self.total.value), comps, grad


def build_objective(spec: ModelSpec, params: ParamStore, target_gradient, label: int,
                    prior_trace, weights: LossWeights, init=None) -> Objective:
    """Graph for ``s_g*(l_g + alpha*TV) + s_a*l_a + s_s*l_s`` and its image gradient."""
    target_gradient = np.asarray(target_gradient, dtype=np.float64)
    if target_gradient.shape != (params.size,):
        raise LossError(f"captured gradient has length {target_gradient.size}, model has {params.size} parameters")
    if not np.linalg.norm(target_gradient) > 0:
        raise LossError("captured gradient is zero")
    if weights.uses_prior and prior_trace is None:
        raise LossError("activation/style weights are set but no prior was given")

    graph = ad.Graph()
    x = graph.input(np.zeros(spec.input_shape) if init is None else init, name="x")
    nodes = {name: graph.constant(value) for name, value in params.items()}
    logits, trace = apply(spec, x, nodes)
    loss = ad.softmax_cross_entropy(logits, label)
    grads = ad.grad(loss, [nodes[n] for n in params.names])
    cand = ad.concat([ad.reshape(grads[nodes[n]], (params[n].size,)) for n in params.names])

    zero = graph.constant(0.0)
    l_g = gradient_cosine_loss(graph.constant(target_gradient), cand)
    tv = total_variation(x)
    l_a = l_s = zero
    if prior_trace is not None and weights.uses_prior:
        prior = [(j, graph.constant(a)) for j, a in prior_trace]
        if weights.s_a > 0:
            l_a = activation_match_loss(trace, prior, weights.layer_weights)
        if weights.s_s > 0:
            style = weights.style_layers
            if style is None:
                style = conv_trace_indices(spec)
            l_s = style_loss(trace, prior, style)

    total = (l_g + tv * weights.alpha_tv) * weights.s_g + l_a * weights.s_a + l_s * weights.s_s
    gradient = ad.grad(total, [x])[x]
    return Objective(
        graph, x, total, {"l_g": l_g, "tv": tv, "l_a": l_a, "l_s": l_s}, gradient, ad.l2_norm(cand)
    )


def combined_loss(capture, model: Model | ModelSpec, params: ParamStore, x_cand, prior_trace,
                  weights: LossWeights, label: int | None = None):
    """Evaluate the reconstruction loss at ``x_cand``.

    Returns ``(total, components)`` with components ``l_g``, ``tv``, ``l_a``,
    ``l_s`` reported unweighted.
    """
    spec = model.spec if isinstance(model, Model) else model
    if label is None:
        label = capture.label
    if label is None:
        raise LossError("label unknown; restore it first")
    obj = build_objective(spec, params, capture.gradient, label, prior_trace, weights, init=x_cand)
    total, comps, _ = obj.evaluate(x_cand, with_gradient=False)
    return total, comps
