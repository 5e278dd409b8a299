import warnings

import numpy as np
import pytest

from conftest import collapsed_state, mp_gradient, small_config
from deepufm import _kernels
from deepufm.model import HyperConfig, build_labels, forward, init_state, loss
from deepufm.training import (
    TrainingDiverged,
    dnc1_metric,
    gradient_update_term,
    gradients,
    is_collapsed,
    scatter_matrices,
    train,
)


def _kernel_args(state, cfg):
    ws = np.stack(state.W[:-1])
    return state.H1, ws, state.W[-1], build_labels(cfg.K, cfg.n), np.asarray(cfg.lambda_W), cfg.lambda_H1, cfg.relu


@pytest.mark.parametrize("activation", ["linear", "relu"])
def test_gradients_match_extended_precision_differences(activation):
    cfg = small_config(activation, seed=11)
    state = init_state(cfg)
    g = gradients(state, forward(state, cfg), cfg)
    ref = mp_gradient(state, cfg)
    for got, want in zip((g.dH1, *g.dW), ref):
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-13)


@pytest.mark.parametrize("activation", ["linear", "relu"])
def test_kernel_backends_agree_with_reference_gradients(activation):
    cfg = small_config(activation, K=3, n=4, d=6, L=4, seed=4)
    state = init_state(cfg)
    cache = forward(state, cfg)
    g = gradients(state, cache, cfg)
    for fn in (_kernels.loss_and_grads_numba, _kernels.loss_and_grads_numpy):
        value, g_h, g_ws, g_last = fn(*_kernel_args(state, cfg))
        assert abs(value - loss(state, cfg, cache)) < 1e-13
        np.testing.assert_allclose(g_h, g.dH1, atol=1e-13)
        np.testing.assert_allclose(g_last, g.dW[-1], atol=1e-13)
        for j in range(cfg.L - 1):
            np.testing.assert_allclose(g_ws[j], g.dW[j], atol=1e-13)


def test_masked_tail_backends_agree(rng):
    tail = rng.standard_normal((5, 3, 4))
    w = rng.standard_normal((4, 6))
    mask = rng.random((5, 6)) > 0.5
    np.testing.assert_allclose(_kernels.masked_tail_numba(tail, w, mask), _kernels.masked_tail_numpy(tail, w, mask))


def test_zero_step_leaves_state_unchanged():
    cfg = small_config(lr=0.0, max_epochs=5)
    state = init_state(cfg)
    out, tlog = train(cfg, state=state.copy())
    for a, b in zip(out.params(), state.params()):
        np.testing.assert_array_equal(a, b)
    assert tlog.final_epoch == 5 and not tlog.converged


def test_zero_epoch_budget_returns_initial_state():
    cfg = small_config(max_epochs=0)
    out, tlog = train(cfg)
    np.testing.assert_array_equal(out.H1, init_state(cfg).H1)
    assert tlog.final_epoch == 0 and len(tlog.records) == 1


def test_small_steps_decrease_loss_monotonically():
    cfg = small_config(lr=0.05, max_epochs=300, eval_every=1)
    _, tlog = train(cfg)
    losses = [r.loss for r in tlog.records]
    assert not tlog.increase_events
    assert np.all(np.diff(losses) <= 0)


def test_training_is_deterministic():
    cfg = small_config(max_epochs=200, lr=0.05)
    a, _ = train(cfg)
    b, _ = train(cfg)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)


def test_divergence_is_reported():
    cfg = small_config(lr=50.0, max_epochs=500, init_std=2.0)
    with pytest.raises(TrainingDiverged):
        train(cfg)


def test_snapshots_are_delivered():
    cfg = small_config(max_epochs=30, lr=0.05)
    seen = []
    train(cfg, snapshot_epochs=(0, 10, 30), on_snapshot=lambda e, s: seen.append(e))
    assert seen == [0, 10, 30]


def test_gate_failure_warns_and_collapses_to_zero():
    cfg = HyperConfig(K=2, n=2, d=3, L=2, lambda_H1=0.5, lambda_W=0.5, lr=0.5, max_epochs=3000)
    with pytest.warns(UserWarning):
        state, tlog = train(cfg)
    assert max(np.abs(p).max() for p in state.params()) < 1e-6
    assert not tlog.collapsed
    assert tlog.last().dnc1[1].degenerate


def test_small_linear_run_converges_and_collapses():
    cfg = HyperConfig(K=2, n=3, d=4, L=2, lambda_H1=1e-2, lambda_W=1e-2, lr=0.5, max_epochs=20000)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        state, tlog = train(cfg)
    assert tlog.converged and tlog.collapsed
    assert tlog.last().grad_norm <= cfg.grad_tol


def test_dnc1_matches_definition_loop(rng):
    K, n, d = 3, 4, 5
    feats = rng.standard_normal((d, K * n))
    sw, sb = scatter_matrices(feats, K, n)
    mu = [feats[:, c * n : (c + 1) * n].mean(axis=1) for c in range(K)]
    mg = np.mean(mu, axis=0)
    sw_ref = sum(np.outer(feats[:, s] - mu[s // n], feats[:, s] - mu[s // n]) for s in range(K * n)) / (K * n)
    sb_ref = sum(np.outer(m - mg, m - mg) for m in mu) / K
    np.testing.assert_allclose(sw, sw_ref, atol=1e-12)
    np.testing.assert_allclose(sb, sb_ref, atol=1e-12)


def test_dnc1_zero_on_collapsed_and_degenerate_on_zero():
    cfg = small_config(K=3, n=4, d=6, L=3)
    cache = forward(collapsed_state(cfg), cfg)
    for l in range(1, cfg.L + 1):
        m = dnc1_metric(cache, l)
        assert m.value < 1e-20 and not m.degenerate
    zero = collapsed_state(cfg)
    zero = type(zero)(np.zeros_like(zero.H1), zero.W)
    m = dnc1_metric(forward(zero, cfg), 1)
    assert m.degenerate and m.value == 0.0
    assert not is_collapsed({1: m})


def test_dnc1_value_on_random_features():
    cfg = small_config(K=2, n=3, d=4)
    cache = forward(init_state(cfg), cfg)
    sw, sb = scatter_matrices(cache.h(1), 2, 3)
    ref = sw @ np.linalg.pinv(sb, rcond=1e-8, hermitian=True)
    assert abs(dnc1_metric(cache, 1).value - np.sum(ref * ref)) < 1e-8 * np.sum(ref * ref)


@pytest.mark.parametrize("activation", ["linear", "relu"])
def test_update_term_is_gradient_without_regulariser(activation):
    cfg = small_config(activation, K=3, n=2, d=5, L=4, seed=9)
    state = init_state(cfg)
    cache = forward(state, cfg)
    g = gradients(state, cache, cfg)
    for l in range(1, cfg.L + 1):
        expected = g.dW[l - 1] - cfg.lambda_W[l - 1] * state.W[l - 1]
        np.testing.assert_allclose(gradient_update_term(cache, l), expected.reshape(-1), atol=1e-14)


def test_subnormal_parameters_are_flushed_to_zero():
    cfg = small_config("relu", seed=4, lr=0.1, max_epochs=1)
    state = init_state(cfg)
    w = state.W[1].copy()
    w[0, :] = 1e-320
    state = type(state)(state.H1, (state.W[0], w, state.W[2]))
    out, _ = train(cfg, state=state)
    for p in out.params():
        assert not np.any((p != 0) & (np.abs(p) < np.finfo(np.float64).tiny))
