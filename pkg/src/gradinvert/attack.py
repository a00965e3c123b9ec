"""The reconstruction loop.

A candidate image is optimized with AdamW against the combined loss, projected
back into [0, 1] after every step, and the best iterate (by loss) is kept.
:func:`attack_with_priors` repeats this for every same-class prior and every
restart and picks the overall minimum.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, check_keys, parse_int_list, parse_lines
from .labels import restore_label
from .losses import LossWeights, build_objective
from .models import Model, ModelSpec, ParamStore, build_model, forward_with_trace

CONFIG_KEYS = (
    "iterations", "restarts", "lr", "beta1", "beta2", "eps", "weight_decay", "init", "seed",
    "s_a", "s_g", "s_s", "alpha_tv", "style_layers", "layer_weights", "log_every",
)
INIT_SCHEMES = ("uniform01", "gaussian")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 2000
    restarts: int = 1
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    init: str = "uniform01"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def with_weights(self, **changes) -> "AttackConfig":
        return replace(self, weights=replace(self.weights, **changes))

    @classmethod
    def from_text(cls, text: str) -> "AttackConfig":
        cfg = parse_lines(text)
        check_keys(cfg, CONFIG_KEYS, "attack")
        kwargs, weights = {}, {}
        try:
            for key in ("iterations", "restarts", "seed", "log_every"):
                if key in cfg:
                    kwargs[key] = int(cfg[key])
            for key in ("lr", "beta1", "beta2", "eps", "weight_decay"):
                if key in cfg:
                    kwargs[key] = float(cfg[key])
            if "init" in cfg:
                kwargs["init"] = cfg["init"]
            for key in ("s_a", "s_g", "s_s", "alpha_tv"):
                if key in cfg:
                    weights[key] = float(cfg[key])
            if "style_layers" in cfg:
                v = cfg["style_layers"].strip()
                weights["style_layers"] = None if v in ("", "conv", "default") else tuple(parse_int_list(v))
            if "layer_weights" in cfg:
                lw = {}
                for item in cfg["layer_weights"].replace(",", " ").split():
                    j, _, w = item.partition(":")
                    lw[int(j)] = float(w)
                weights["layer_weights"] = lw
        except ValueError as exc:
            raise ConfigError(f"bad attack config value: {exc}") from None
        return cls(weights=LossWeights(**weights), **kwargs)

    def to_text(self) -> str:
        w = self.weights
        style = "conv" if w.style_layers is None else ",".join(str(j) for j in w.style_layers)
        lw = ",".join(f"{j}:{v!r}" for j, v in sorted(w.layer_weights.items()))
        rows = [
            ("iterations", self.iterations), ("restarts", self.restarts), ("lr", repr(self.lr)),
            ("beta1", repr(self.beta1)), ("beta2", repr(self.beta2)), ("eps", repr(self.eps)),
            ("weight_decay", repr(self.weight_decay)), ("init", self.init), ("seed", self.seed),
            ("s_a", repr(w.s_a)), ("s_g", repr(w.s_g)), ("s_s", repr(w.s_s)),
            ("alpha_tv", repr(w.alpha_tv)), ("style_layers", style), ("layer_weights", lw),
            ("log_every", self.log_every),
        ]
        return "".join(f"{k} = {v}\n" for k, v in rows)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adamw_step(state: AdamState, x, gradient, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update; returns ``(new_state, new_x)`` without mutating inputs."""
    gradient = np.asarray(gradient, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if gradient.shape != state.m.shape or x.shape != state.m.shape:
        raise ValueError(f"optimizer state has shape {state.m.shape}, got {x.shape} / {gradient.shape}")
    if not np.all(np.isfinite(gradient)):
        raise AttackError("non-finite gradient")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * gradient
    v = b2 * state.v + (1.0 - b2) * gradient * gradient
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    x = x - lr * weight_decay * x
    x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), x


@dataclass
class ReconstructionResult:
    image: np.ndarray
    loss: float
    components: dict
    trace: list
    label: int
    prior_id: int | None
    restart: int
    seed: int
    best_iteration: int
    wall_time: float = 0.0
    fallback: bool = False
    flags: tuple = ()


def initial_image(shape, scheme: str, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x1A17])))
    if scheme == "uniform01":
        return rng.uniform(0.0, 1.0, size=shape)
    if scheme == "gaussian":
        return np.clip(rng.normal(0.5, 0.25, size=shape), 0.0, 1.0)
    raise ConfigError(f"unknown init scheme {scheme!r}")


def _spec_of(model) -> ModelSpec:
    return model.spec if isinstance(model, Model) else model


def activation_trace(spec: ModelSpec, params: ParamStore, image) -> list:
    model, _ = build_model(spec, 0)
    return forward_with_trace(model, params, image)[1]


def reconstruct(capture, model, params: ParamStore, prior=None, config: AttackConfig = AttackConfig(), *,
                label: int | None = None, prior_id: int | None = None, restart: int = 0, init=None):
    """Run one reconstruction and return its best iterate.

    Args:
        capture: the victim's :class:`~gradinvert.fl.GradientCapture`.
        model: a :class:`Model` or :class:`ModelSpec`.
        params: parameters the victim computed the gradient with.
        prior: attacker-held image; required when ``s_a`` or ``s_s`` is set.
        config: optimizer and loss settings.
        label: victim label; restored from the gradient when omitted.
        restart: restart index; the init seed is ``config.seed + restart``.
        init: explicit starting image, overriding ``config.init``.
    """
    spec = _spec_of(model)
    weights = config.weights
    if label is None:
        label = capture.label if capture.label is not None else restore_label(capture, spec)
    if weights.uses_prior and prior is None:
        raise AttackError("a prior image is required when s_a or s_s is non-zero")
    prior_trace = activation_trace(spec, params, prior) if prior is not None and weights.uses_prior else None

    seed = config.seed + restart
    x = initial_image(spec.input_shape, config.init, seed) if init is None else np.array(init, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise AttackError(f"initial image has shape {x.shape}, model expects {spec.input_shape}")
    objective = build_objective(spec, params, capture.gradient, label, prior_trace, weights, init=x)

    started = time.perf_counter()
    state = AdamState.zeros(x.shape)
    betas = (config.beta1, config.beta2)
    trace, flags = [], set()
    best = None
    for t in range(config.iterations + 1):
        last = t == config.iterations
        total, comps, grad = objective.evaluate(x, with_gradient=not last)
        if comps.pop("zero_grad"):
            flags.add("zero_candidate_gradient")
        if not math.isfinite(total):
            if t == 0:
                raise AttackError("loss is not finite at the initial image")
            flags.add("non_finite_loss")
            break
        if best is None or total < best[2]:
            best = (t, x, total, comps)
        if t % config.log_every == 0 or last:
            trace.append((t, total, comps["l_g"], comps["tv"], comps["l_a"], comps["l_s"]))
        if last:
            break
        try:
            state, x = adamw_step(state, x, grad, config.lr, betas, config.eps, config.weight_decay)
        except AttackError:
            flags.add("non_finite_gradient")
            break
        x = np.clip(x, 0.0, 1.0)

    t_best, image, loss, comps = best
    return ReconstructionResult(
        image=np.array(image), loss=loss, components=comps, trace=trace, label=int(label),
        prior_id=prior_id, restart=restart, seed=seed, best_iteration=t_best,
        wall_time=time.perf_counter() - started, flags=tuple(sorted(flags)),
    )


def _job(args):
    capture, spec, params, prior, prior_id, config, label, restart = args
    return reconstruct(capture, spec, params, prior, config, label=label, prior_id=prior_id, restart=restart)


def run_jobs(jobs, workers: int = 1):
    """Map :func:`reconstruct` over argument tuples, in order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def select_best(results):
    """Lowest loss; ties go to the lower prior id, then the lower restart."""
    return min(results, key=lambda r: (r.loss, -1 if r.prior_id is None else r.prior_id, r.restart))


def attack_with_priors(capture, model, params: ParamStore, priors, config: AttackConfig = AttackConfig(), *,
                       label: int | None = None, workers: int = 1):
    """Reconstruct once per (same-class prior, restart) and keep the best.

    ``priors`` is a sequence of objects with ``id``, ``label`` and ``image``.
    When none of them shares the restored label a single gradient-only
    reconstruction is run instead and flagged with ``fallback=True``.

    Returns ``(best, all_results)``.
    """
    spec = _spec_of(model)
    priors = list(priors or [])
    if config.weights.uses_prior and not priors:
        raise AttackError("prior-augmented attack needs at least one prior")
    if label is None:
        label = capture.label if capture.label is not None else restore_label(capture, spec)
    matching = sorted((p for p in priors if p.label == label), key=lambda p: p.id)

    if not config.weights.uses_prior:
        jobs = [(capture, spec, params, None, None, config, label, r) for r in range(config.restarts)]
        results = run_jobs(jobs, workers)
        return select_best(results), results
    if not matching:
        fallback = replace(config, weights=LossWeights.gradient_only(config.weights.alpha_tv))
        jobs = [(capture, spec, params, None, None, fallback, label, r) for r in range(config.restarts)]
        results = run_jobs(jobs, workers)
        for r in results:
            r.fallback = True
        return select_best(results), results

    jobs = [
        (capture, spec, params, p.image, p.id, config, label, r)
        for p in matching
        for r in range(config.restarts)
    ]
    results = run_jobs(jobs, workers)
    return select_best(results), results
