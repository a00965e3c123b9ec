from dataclasses import replace

import numpy as np
import pytest

from gradinvert.attack import (
    AdamState, AttackConfig, AttackError, ReconstructionResult, activation_trace, adamw_step, attack_with_priors,
    initial_image, reconstruct, select_best,
)
from gradinvert.config import ConfigError
from gradinvert.data import Sample, SyntheticSpec, generate_synthetic
from gradinvert.fl import victim_round
from gradinvert.losses import LossWeights, combined_loss
from gradinvert.models import build_model, convnet_s


def test_adamw_first_step():
    state, x = adamw_step(AdamState.zeros(()), np.array(0.0), np.array(1.0), lr=0.1)
    assert x == pytest.approx(-0.1, abs=1e-8)
    assert state.t == 1


def test_adamw_zero_gradient_is_fixed_point():
    x0 = np.array([0.3, -2.0, 5.0])
    _, x = adamw_step(AdamState.zeros(3), x0, np.zeros(3), lr=0.1)
    np.testing.assert_array_equal(x, x0)


def test_adamw_decay_shrinks_by_factor():
    x0 = np.array([0.3, -2.0, 5.0])
    _, x = adamw_step(AdamState.zeros(3), x0, np.zeros(3), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(x, x0 * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(AttackError):
        adamw_step(AdamState.zeros(2), np.zeros(2), np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        adamw_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_config_validation_and_text_round_trip():
    cfg = AttackConfig(iterations=5, restarts=2, init="gaussian", seed=9,
                       weights=LossWeights(s_a=0.5, layer_weights={1: 0.25}, style_layers=(0,)))
    assert AttackConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        AttackConfig.from_text("iterations = 10\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        AttackConfig(iterations=0)
    with pytest.raises(ConfigError):
        AttackConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        AttackConfig(init="zeros")


@pytest.fixture(scope="module")
def world():
    spec = convnet_s(10)
    _, params = build_model(spec, 0)
    ds = generate_synthetic(SyntheticSpec(seed=3, num_classes=10))
    victim = ds.split("victim")[0]
    capture = victim_round(spec, params, victim.image, victim.label)
    return spec, params, ds, victim, capture


def test_ground_truth_init_is_a_fixed_point(world):
    spec, params, _, victim, capture = world
    cfg = AttackConfig(iterations=20).with_weights(alpha_tv=0.0)
    res = reconstruct(capture, spec, params, victim.image, cfg, init=victim.image)
    assert res.loss <= 1e-10
    np.testing.assert_array_equal(res.image, victim.image)


def test_zero_learning_rate_returns_init(world):
    spec, params, _, _, capture = world
    cfg = AttackConfig(iterations=1, lr=0.0, weights=LossWeights.gradient_only())
    res = reconstruct(capture, spec, params, None, cfg)
    np.testing.assert_array_equal(res.image, initial_image(spec.input_shape, "uniform01", 0))


def test_label_is_restored_when_not_given(world):
    spec, params, _, victim, capture = world
    res = reconstruct(capture, spec, params, None, AttackConfig(iterations=1, weights=LossWeights.gradient_only()))
    assert res.label == victim.label


def test_prior_required_for_prior_terms(world):
    spec, params, _, _, capture = world
    with pytest.raises(AttackError):
        reconstruct(capture, spec, params, None, AttackConfig(iterations=1))


def test_result_invariants(world):
    spec, params, ds, victim, capture = world
    prior = ds.split("prior")[victim.label * 3]
    cfg = AttackConfig(iterations=60, log_every=1)
    res = reconstruct(capture, spec, params, prior.image, cfg, prior_id=prior.id)
    assert 0.0 <= res.image.min() and res.image.max() <= 1.0
    total, comps = combined_loss(capture, spec, params, res.image, activation_trace(spec, params, prior.image),
                                 cfg.weights, label=res.label)
    assert abs(total - res.loss) <= 1e-9
    assert res.loss <= res.trace[-1][1]
    assert res.loss == min(row[1] for row in res.trace)
    assert len(res.trace) == cfg.iterations + 1
    assert all(np.isfinite(v) for row in res.trace for v in row)
    assert res.prior_id == prior.id and res.seed == 0 and res.restart == 0


def test_reconstruction_is_deterministic(world):
    spec, params, ds, victim, capture = world
    cfg = AttackConfig(iterations=15, log_every=1)
    prior = ds.split("prior")[victim.label * 3 + 1].image
    a = reconstruct(capture, spec, params, prior, cfg)
    b = reconstruct(capture, spec, params, prior, cfg)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.trace == b.trace


def test_parallel_matches_serial(world):
    spec, params, ds, victim, capture = world
    cfg = AttackConfig(iterations=5, restarts=2)
    serial, all_s = attack_with_priors(capture, spec, params, ds.split("prior"), cfg, workers=1)
    parallel, all_p = attack_with_priors(capture, spec, params, ds.split("prior"), cfg, workers=2)
    assert [r.image.tobytes() for r in all_s] == [r.image.tobytes() for r in all_p]
    assert serial.loss == parallel.loss


def test_restart_prefix_is_monotone(world):
    spec, params, _, _, capture = world
    cfg = AttackConfig(iterations=10, restarts=4, weights=LossWeights.gradient_only())
    _, results = attack_with_priors(capture, spec, params, [], cfg)
    assert [r.seed for r in results] == [0, 1, 2, 3]
    best = [min(r.loss for r in results[:k]) for k in range(1, 5)]
    assert best == sorted(best, reverse=True)


def test_singleton_attack_equals_reconstruct(world):
    spec, params, ds, victim, capture = world
    prior = [p for p in ds.split("prior") if p.label == victim.label][:1]
    cfg = AttackConfig(iterations=10)
    best, results = attack_with_priors(capture, spec, params, prior, cfg)
    single = reconstruct(capture, spec, params, prior[0].image, cfg, prior_id=prior[0].id)
    assert len(results) == 1
    assert best.image.tobytes() == single.image.tobytes() and best.loss == single.loss


def test_duplicate_priors_tie_to_lowest_id(world):
    spec, params, ds, victim, capture = world
    p = [s for s in ds.split("prior") if s.label == victim.label][0]
    dups = [Sample(42, p.label, "prior", p.image), Sample(7, p.label, "prior", p.image)]
    best, results = attack_with_priors(capture, spec, params, dups, AttackConfig(iterations=5))
    assert results[0].loss == results[1].loss
    assert best.prior_id == 7


def test_select_best_order():
    def r(loss, pid, restart):
        return ReconstructionResult(np.zeros(1), loss, {}, [], 0, pid, restart, restart, 0)

    assert select_best([r(1.0, 3, 0), r(1.0, 2, 1), r(1.0, 2, 0), r(2.0, 0, 0)]).restart == 0
    assert select_best([r(1.0, 3, 0), r(0.5, 9, 3)]).prior_id == 9


def test_prior_equal_to_victim_wins(world):
    spec, params, ds, victim, capture = world
    others = [s for s in ds.split("prior") if s.label == victim.label][:2]
    priors = others + [Sample(999, victim.label, "prior", victim.image)]
    best, results = attack_with_priors(capture, spec, params, priors, AttackConfig(iterations=100))
    assert best.prior_id == 999
    assert len(results) == 3


def test_fallback_without_matching_prior(world):
    spec, params, ds, victim, capture = world
    wrong = [s for s in ds.split("prior") if s.label != victim.label]
    best, results = attack_with_priors(capture, spec, params, wrong, AttackConfig(iterations=3))
    assert best.fallback and best.prior_id is None
    assert len(results) == 1


def test_empty_prior_set_is_an_error(world):
    spec, params, _, _, capture = world
    with pytest.raises(AttackError):
        attack_with_priors(capture, spec, params, [], AttackConfig(iterations=3))


def test_with_weights_replaces_only_named_fields():
    cfg = AttackConfig().with_weights(s_a=0.0)
    assert cfg.weights == replace(LossWeights(), s_a=0.0)
