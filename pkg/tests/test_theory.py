import numpy as np
import pytest

from conftest import collapsed_state, small_config
from deepufm import analysis as an
from deepufm import theory as th
from deepufm.model import HyperConfig, forward, init_state
from deepufm.training import gradient_update_term


@pytest.fixture
def collapsed():
    cfg = small_config(K=3, n=4, d=6, L=4, lambda_W=(1e-2, 2e-2, 5e-3, 1e-2))
    state = collapsed_state(cfg, s=0.9, rng=np.random.default_rng(5))
    return cfg, state, forward(state, cfg)


@pytest.mark.parametrize("l", [1, 2, 3])
def test_predicted_spectra_match_constructed_state(collapsed, l):
    cfg, state, cache = collapsed
    pred = th.estimate_constants(cache, state, cfg, l, require_collapse=False)
    assert pred.here.fit_residual < 1e-13 and pred.above.fit_residual < 1e-13
    tol = 1e-10
    families = {
        "hessian": an.spectrum(an.hessian_layer(cache, l)),
        "weight_gram": an.weight_gram_spectrum(state, l),
        "grad_cov": an.spectrum(an.gradient_covariance(cache, l)),
        "backprop": an.spectrum(an.backprop_error_moment(cache, l)),
        "feature_gram": an.spectrum(an.feature_gram(cache, l)),
    }
    for name, summary in families.items():
        rep = th.compare(pred, summary, name, tol)
        assert rep.passed, (name, rep.max_error, summary.outlier_count)
    g_class, g_cross, _ = an.papyan_components(cache, l)
    assert th.compare(pred, an.spectrum(g_class), "g_class", tol).passed
    assert th.compare(pred, an.spectrum(g_cross), "g_cross", tol).passed


@pytest.mark.parametrize("family", ["hessian", "g_class", "g_cross", "grad_cov", "backprop", "weight_gram", "feature_gram"])
def test_predicted_vectors_are_eigenvectors(collapsed, family):
    cfg, state, cache = collapsed
    l = 2
    pred = th.estimate_constants(cache, state, cfg, l, require_collapse=False)
    pv = th.predicted_eigvecs(pred, family)
    g_class, g_cross, _ = an.papyan_components(cache, l)
    matrix = {
        "hessian": an.hessian_layer(cache, l),
        "g_class": g_class,
        "g_cross": g_cross,
        "grad_cov": an.gradient_covariance(cache, l),
        "backprop": an.backprop_error_moment(cache, l),
        "weight_gram": an.weight_gram(state, l),
        "feature_gram": an.feature_gram(cache, l),
    }[family]
    values = pv.values
    if len(values) == len(pv.vectors):
        for v, lam in zip(pv.vectors, values):
            np.testing.assert_allclose(matrix @ v, lam * v, atol=1e-10 * max(1.0, abs(lam)) * np.linalg.norm(v))
    else:
        # shared eigenvalue: the vectors span an invariant subspace
        lam = values[0]
        for v in pv.vectors:
            np.testing.assert_allclose(matrix @ v, lam * v, atol=1e-10 * max(1.0, lam) * np.linalg.norm(v))


def test_predicted_gradient_matches_update_term(collapsed):
    cfg, state, cache = collapsed
    for l in (1, 2, 3):
        pred = th.estimate_constants(cache, state, cfg, l, require_collapse=False)
        np.testing.assert_allclose(gradient_update_term(cache, l), pred.gradient, atol=1e-13)
        rep = th.compare(pred, gradient_update_term(cache, l), "gradient", 1e-12)
        assert rep.passed and abs(rep.detail["cosine"] - 1) < 1e-12


def test_constants_identities(collapsed):
    cfg, state, cache = collapsed
    c = th.estimate_constants(cache, state, cfg, 2, require_collapse=False).here
    assert c.beta == c.alpha**2 * c.mean_norm_sq - c.alpha
    assert c.gamma == c.alpha * c.mean_norm_sq
    # the collapsed output equals gamma times the one-hot target
    z = cache.outputs.reshape(cfg.K, cfg.K, cfg.n).mean(axis=2)
    np.testing.assert_allclose(z, c.gamma * np.eye(cfg.K), atol=1e-12)
    assert c.norm_spread < 1e-12


def test_backprop_lone_eigenvalue_is_smaller_and_vanishes_at_unit_output():
    cfg = small_config(K=3, n=4, d=6, L=3)
    state = collapsed_state(cfg, output_scale=1.0)
    cache = forward(state, cfg)
    pred = th.estimate_constants(cache, state, cfg, 2, require_collapse=False)
    assert abs(pred.here.gamma - 1.0) < 1e-12
    vals = an.spectrum(an.backprop_error_moment(cache, 2)).eigenvalues
    assert vals[2] < 1e-12 * vals[0]
    for scale in (0.3, 0.9, 1.7):
        st = collapsed_state(cfg, output_scale=scale)
        bp = th.estimate_constants(forward(st, cfg), st, cfg, 2, require_collapse=False).spectra["backprop"]
        assert bp[-1] <= bp[0]


def test_subspace_projections():
    rng = np.random.default_rng(0)
    basis = rng.standard_normal((3, 10))
    inside = basis.T @ rng.standard_normal((3, 2))
    proj, angles = th.subspace_projections(basis, inside)
    np.testing.assert_allclose(proj, 1.0, atol=1e-12)
    np.testing.assert_allclose(angles, 0.0, atol=1e-6)
    outside = np.linalg.svd(basis)[2][3:5].T
    proj, _ = th.subspace_projections(basis, outside)
    np.testing.assert_allclose(proj, 0.0, atol=1e-12)


def test_guard_refuses_uncollapsed_and_gate_failures():
    cfg = small_config(K=3, n=4, d=6, L=3)
    state = init_state(cfg)
    with pytest.raises(th.NotCollapsedError):
        th.estimate_constants(forward(state, cfg), state, cfg, 2)
    bad = HyperConfig(K=3, n=4, d=6, L=3, lambda_H1=1.0, lambda_W=1.0)
    state = collapsed_state(bad)
    with pytest.raises(th.NotCollapsedError, match="gate"):
        th.estimate_constants(forward(state, bad), state, bad, 2)


def test_grid_comparison_against_one_over_k(collapsed):
    cfg, state, cache = collapsed
    pred = th.estimate_constants(cache, state, cfg, 2, require_collapse=False)
    rep = th.compare(pred, an.gradient_alignment(cache, 2), "gradient", 1e-12)
    assert rep.passed
