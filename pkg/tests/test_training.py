import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prpl import model as M
from prpl import objectives as O
from prpl.config import ABLATIONS, TrainConfig
from prpl.data import SyntheticSpec, generate_synthetic
from prpl.errors import DatasetError
from prpl.gradcheck import gradcheck_instance
from prpl.training import (Batch, RMSpropState, Schedules, backward, epoch_schedules,
                           epoch_thresholds, fit, forward, losses, make_batches,
                           rmsprop_step)


def small_problem(seed=0, config=TrainConfig()):
    return gradcheck_instance(seed, d_in=5, n_samples=9, n_classes=3, config=config)


# ---------------------------------------------------------------- batching

def test_batch_count_and_sizes():
    y = np.arange(192) % 3
    batches = make_batches(y, 150, 96, seed=0)
    assert len(batches) == 2
    for src, tgt in batches:
        assert len(src) == len(tgt) == 96


@given(st.integers(0, 10_000), st.integers(3, 64), st.integers(2, 6))
def test_every_source_batch_holds_every_class(seed, batch_size, n):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(n), rng.integers(0, n, size=int(rng.integers(0, 200)))])
    if batch_size < n:
        with pytest.raises(DatasetError):
            make_batches(y, 50, batch_size, seed)
        return
    for src, tgt in make_batches(y, 50, batch_size, seed):
        assert set(y[src]) == set(range(n))
        assert len(src) == batch_size == len(tgt)
        assert tgt.max() < 50


def test_batches_deterministic_per_seed():
    y = np.arange(300) % 3
    a = make_batches(y, 200, 96, seed=5)
    b = make_batches(y, 200, 96, seed=5)
    c = make_batches(y, 200, 96, seed=6)
    assert all(np.array_equal(x[0], z[0]) and np.array_equal(x[1], z[1]) for x, z in zip(a, b))
    assert not all(np.array_equal(x[0], z[0]) for x, z in zip(a, c))


def test_longer_domain_covered_once_per_epoch():
    y = np.arange(96) % 3
    batches = make_batches(y, 288, 96, seed=1)
    tgt = np.concatenate([t for _, t in batches])
    assert sorted(tgt) == list(range(288))


def test_missing_source_class_is_reported():
    with pytest.raises(DatasetError):
        make_batches(np.array([0, 0, 2]), 5, 4, seed=0, n_classes=3)


# ---------------------------------------------------------------- optimiser

def test_rmsprop_first_step_formula():
    p = M.init_params(0, 2, 2)
    before = p.S.copy()
    g = p.zeros_like()
    g.S[:] = 0.3
    state = RMSpropState.zeros(p)
    rmsprop_step(p, g, state, lr=1e-3, l2_weight=0.0)
    step = 1e-3 * 0.3 / math.sqrt(0.01 * 0.09 + 1e-8)
    np.testing.assert_allclose(before - p.S, step, rtol=1e-12)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = M.init_params(0, 2, 2)
    g = p.zeros_like()
    g.S[:] = -2.0
    state = RMSpropState.zeros(p)
    for _ in range(3000):
        before = p.S.copy()
        rmsprop_step(p, g, state, lr=1e-3)
    np.testing.assert_allclose(p.S - before, 1e-3, rtol=1e-6)


def test_rmsprop_decoupled_decay():
    p = M.init_params(0, 2, 2)
    before = p.S.copy()
    rmsprop_step(p, p.zeros_like(), RMSpropState.zeros(p), lr=0.1, l2_weight=0.5)
    np.testing.assert_allclose(p.S, before * (1 - 0.05), rtol=1e-14)


# ---------------------------------------------------------------- schedules

def test_epoch_schedules_progress():
    cfg = TrainConfig(maxepoch=10)
    s = epoch_schedules(cfg, 5)
    assert s.lam == pytest.approx(O.lambda_schedule(0.5))
    assert s.gamma == pytest.approx(1.0)
    assert epoch_schedules(cfg.with_(gamma_mode="fixed"), 1).gamma == 2.0
    off = epoch_schedules(cfg.with_(**ABLATIONS["source_only"]), 5)
    assert off.lam == 0.0 and off.gamma == 0.0


def test_epoch_thresholds_by_mode():
    cfg = TrainConfig(maxepoch=10)
    state = O.ThresholdState(0.85, 0.55)
    assert epoch_thresholds(cfg, 3, state) is state
    assert epoch_thresholds(cfg.with_(pseudo_mode="fixed"), 7, state).tau_h == 0.9
    lin = epoch_thresholds(cfg.with_(pseudo_mode="linear"), 11, state)
    assert lin.tau_h == pytest.approx(0.7)
    mid = epoch_thresholds(cfg.with_(pseudo_mode="none"), 1, state)
    assert mid.tau_h == mid.tau_l == pytest.approx(0.7)


# ---------------------------------------------------------------- forward / backward

def test_objective_recomposes_from_independent_terms():
    params, batch, sched, pairs, mask = small_problem(3)
    cfg = TrainConfig()
    cache = forward(params, batch, 3, cfg, mask)
    terms, _ = losses(cache, pairs, sched, cfg, want_grad=False)
    Ls, Lt = cache.L_s, cache.L_t
    src = O.source_pairwise_loss(Ls, O.source_pair_labels(batch.ys), cache.P, sched.beta)
    tgt = O.target_pairwise_loss(Lt, pairs)
    F = M.extract_features(params.extractor, np.vstack([batch.xs, batch.xt]))
    d = M.discriminate(params.discriminator, F, mask)
    disc = O.discriminator_loss(d[:9], d[9:])
    expect = O.total_objective(src, tgt, disc, sched.lam, sched.gamma)
    assert terms.objective == pytest.approx(expect, rel=1e-10)


def test_gradient_reversal_identity():
    # extractor gradient of J = (gradient with lambda=0) - lambda * (gradient of L_disc)
    params, batch, sched, pairs, mask = small_problem(4)
    cfg = TrainConfig()
    _, g_full = backward(params, batch, sched, pairs, cfg, mask, 3)
    _, g_nodisc = backward(params, batch, Schedules(0.0, sched.gamma, sched.beta), pairs,
                           cfg, mask, 3)
    only_disc = TrainConfig(no_target_pairwise=True)
    _, g_d1 = backward(params, batch, Schedules(1.0, 0.0, 0.0), None, only_disc, mask, 3)
    _, g_d0 = backward(params, batch, Schedules(0.0, 0.0, 0.0), None, only_disc, mask, 3)
    for name in ("W1", "b1", "W2", "W3"):
        disc_part = getattr(g_d0.extractor, name) - getattr(g_d1.extractor, name)
        np.testing.assert_allclose(
            getattr(g_full.extractor, name),
            getattr(g_nodisc.extractor, name) - sched.lam * disc_part, rtol=1e-9, atol=1e-11)
    # the discriminator gradient does not depend on lambda
    np.testing.assert_allclose(g_full.discriminator.W1, g_nodisc.discriminator.W1)


def test_ablation_zeroes_discriminator_gradients():
    cfg = TrainConfig(no_discriminator=True)
    params, batch, sched, pairs, _ = small_problem(5, cfg)
    _, g = backward(params, batch, sched, pairs, cfg, None, 3)
    for arr in g.discriminator.named_arrays().values():
        assert not arr.any()


def test_no_target_pairwise_ignores_target_pairs():
    cfg = TrainConfig(no_target_pairwise=True)
    params, batch, sched, pairs, mask = small_problem(6, cfg)
    v1, g1 = backward(params, batch, sched, pairs, cfg, mask, 3)
    v2, g2 = backward(params, batch, sched, None, cfg, mask, 3)
    assert v1 == v2
    np.testing.assert_array_equal(g1.S, g2.S)


def test_invalid_pairs_contribute_no_gradient():
    cfg = TrainConfig(no_discriminator=True)
    params, batch, _, pairs, _ = small_problem(7, cfg)
    sched = Schedules(0.0, 1.0, 0.0)
    all_invalid = np.full_like(pairs, O.INVALID)
    _, g_inv = backward(params, batch, sched, all_invalid, cfg, None, 3)
    _, g_none = backward(params, batch, sched, None, cfg, None, 3)
    np.testing.assert_allclose(g_inv.S, g_none.S, rtol=0, atol=0)


def test_target_rows_do_not_move_prototypes():
    # prototypes are source-only: perturbing target inputs changes the target
    # features but not P
    params, batch, _, _, mask = small_problem(8)
    c1 = forward(params, batch, 3, TrainConfig(), mask)
    batch2 = Batch(batch.xs, batch.ys, batch.xt + 1.0)
    c2 = forward(params, batch2, 3, TrainConfig(), mask)
    np.testing.assert_array_equal(c1.P, c2.P)


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def easy_data():
    return generate_synthetic(SyntheticSpec(spread=2.0, per_class=40, d=6), seed=0)


def test_fit_zero_epochs_returns_initial_parameters(easy_data):
    src, tgt = easy_data
    res = fit(TrainConfig(maxepoch=0, seed=2), src.features, src.labels, tgt.features)
    assert len(res.history) == 0
    assert res.prototypes.shape == (3, 64)


def test_fit_is_deterministic(easy_data):
    src, tgt = easy_data
    cfg = TrainConfig(maxepoch=3, seed=1)
    a = fit(cfg, src.features, src.labels, tgt.features)
    b = fit(cfg, src.features, src.labels, tgt.features)
    np.testing.assert_array_equal(a.params.S, b.params.S)
    np.testing.assert_equal(a.history.records, b.history.records)


def test_fit_history_schedules(easy_data):
    src, tgt = easy_data
    cfg = TrainConfig(maxepoch=5, seed=0)
    h = fit(cfg, src.features, src.labels, tgt.features).history
    assert h.column("epoch") == [1, 2, 3, 4, 5]
    taus = h.column("tau_h")
    assert taus[0] == 0.9 and all(a > b for a, b in zip(taus, taus[1:]))
    assert h.column("gamma")[-1] == pytest.approx(2.0)


def test_fit_learns_separable_source(easy_data):
    src, tgt = easy_data
    res = fit(TrainConfig(maxepoch=20, seed=0, **ABLATIONS["source_only"]),
              src.features, src.labels, tgt.features)
    assert np.mean(M.predict(res.params, res.prototypes, src.features) == src.labels) > 0.95


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_trains(easy_data, name):
    src, tgt = easy_data
    res = fit(TrainConfig(maxepoch=2, seed=0, **ABLATIONS[name]),
              src.features, src.labels, tgt.features)
    assert np.all(np.isfinite(res.params.S))
    assert np.isfinite(res.history.records[-1]["objective"])


def test_fit_never_sees_target_labels(easy_data):
    # relabelling the target set cannot change training: fit has no access to it
    src, tgt = easy_data
    cfg = TrainConfig(maxepoch=2, seed=0)
    a = fit(cfg, src.features, src.labels, tgt.features)
    b = fit(cfg, src.features, src.labels, tgt.with_labels(tgt.labels[::-1]).features)
    np.testing.assert_array_equal(a.params.S, b.params.S)


def test_fit_rejects_mismatched_widths(easy_data):
    src, tgt = easy_data
    with pytest.raises(DatasetError):
        fit(TrainConfig(maxepoch=1), src.features, src.labels, tgt.features[:, :3])
