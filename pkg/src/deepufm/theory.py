"""Closed-form predictions at a collapsed optimum, and comparison against measured spectra.

At a collapsed optimum of the linear model the class means of every layer
form an orthogonal frame and the rows of ``A^(l) = W_L ... W_l`` are a common
multiple ``alpha_l`` of the layer-``l`` class means. From ``alpha`` and the
mean norms everything else follows:

* ``beta_l = alpha_l^2 |μ^(l)|^2 - alpha_l`` (``A^(l)^T u_c = beta_l μ_c^(l)``),
* ``gamma_l = alpha_l |μ^(l)|^2`` (the collapsed output is ``z_c = gamma_L e_c``
  and ``A^(l)^T A^(l) μ_c = alpha_l gamma_l μ_c``).

ReLU-mode predictions reuse the linear formulas with per-sample masked
products averaged over samples and post-activation means; they are tagged
``conjectural``.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import SpectralSummary, AlignmentReport, layer_means
from .model import reg_gate
from .numerics import fit_scale
from .training import COLLAPSE_THRESHOLD, dnc1_metric

FAMILIES = ("hessian", "g_class", "g_cross", "grad_cov", "backprop", "feature_gram", "weight_gram")
MAX_FIT_RESIDUAL = 1e-3


class NotCollapsedError(RuntimeError):
    """The state does not satisfy the collapse preconditions of the predictions."""


@dataclass(frozen=True)
class LayerConstants:
    layer: int
    alpha: float
    fit_residual: float
    mean_norm_sq: float
    norm_spread: float

    @property
    def beta(self):
        return self.alpha**2 * self.mean_norm_sq - self.alpha

    @property
    def gamma(self):
        return self.alpha * self.mean_norm_sq


def layer_constants(cache, l):
    """Fit ``A^(l)^T ≈ alpha * [μ_1^(l) .. μ_K^(l)]`` for ``1 <= l <= L+1``."""
    means = layer_means(cache, l)
    tail = cache.tail(l)
    a = tail.mean(axis=0) if tail.ndim == 3 else tail
    fit = fit_scale(a.T, means)
    norms = np.sum(means * means, axis=0)
    mean_sq = float(norms.mean())
    spread = float((norms.max() - norms.min()) / mean_sq) if mean_sq > 0 else 0.0
    return LayerConstants(l, fit.alpha, fit.residual, mean_sq, spread)


@dataclass(frozen=True)
class TheoryPrediction:
    layer: int
    K: int
    n: int
    conjectural: bool
    here: LayerConstants
    above: LayerConstants
    input_norm_sq: float
    lambda_ratio: float
    means: np.ndarray
    means_next: np.ndarray
    spectra: dict = field(default_factory=dict)
    gradient: Optional[np.ndarray] = None

    @property
    def hessian_value(self):
        return self.a_gram_value * self.feature_moment_value

    @property
    def a_gram_value(self):
        return self.above.alpha**2 * self.above.mean_norm_sq

    @property
    def feature_moment_value(self):
        return self.here.mean_norm_sq / self.K


def _check_preconditions(cache, cfg, l, constants):
    gate = reg_gate(cfg)
    if not gate.passed:
        raise NotCollapsedError(
            f"regularisation gate fails ({gate.lhs:.4g} >= {gate.rhs:.4g}); the optimum is the trivial solution"
        )
    for j in (l, l + 1):
        if j > cache.L:
            continue
        m = dnc1_metric(cache, j)
        if m.degenerate:
            raise NotCollapsedError(f"layer {j}: class means coincide (trivial solution)")
        if m.value > COLLAPSE_THRESHOLD:
            raise NotCollapsedError(f"layer {j}: collapse metric {m.value:.3e} above {COLLAPSE_THRESHOLD:g}")
    if cache.relu:
        # the masked products need not be proportional to the means; predictions stay conjectural
        return
    for c in constants:
        if c.fit_residual > MAX_FIT_RESIDUAL:
            raise NotCollapsedError(
                f"layer {c.layer}: tail product is not proportional to the class means "
                f"(relative residual {c.fit_residual:.3e})"
            )


def estimate_constants(cache, state, cfg, l, require_collapse=True):
    """Fit the proportionality constants around layer ``l`` and emit all predictions.

    Raises :class:`NotCollapsedError` unless the state is collapsed at layers
    ``l`` and ``l+1``, the regularisation gate passes and both fits are tight;
    ``require_collapse=False`` skips those checks.
    """
    if not 1 <= l <= cfg.L:
        raise ValueError(f"layer {l} outside 1..{cfg.L}")
    here = layer_constants(cache, l)
    above = layer_constants(cache, l + 1)
    if require_collapse:
        _check_preconditions(cache, cfg, l, (here, above))
    K, n = cfg.K, cfg.n
    mu_in = cache.class_means(1)
    input_norm_sq = float(np.mean(np.sum(mu_in * mu_in, axis=0)))
    ratio = cfg.lambda_H1 / cfg.lambda_W[l - 1]
    means = layer_means(cache, l)
    means_next = layer_means(cache, l + 1)

    hess_val = above.alpha**2 * above.mean_norm_sq * here.mean_norm_sq / K
    spectra = {
        "hessian": np.full(K * K, hess_val),
        "g_class": np.full(K, hess_val),
        "g_cross": np.full(K * (K - 1), hess_val),
        "weight_gram": np.full(K, ratio * n * input_norm_sq),
        "grad_cov": np.full(K - 1, above.beta**2 * above.mean_norm_sq * here.mean_norm_sq / K),
        # δ_cc' = A^T (z_c - y_c') = alpha * (gamma μ_c - μ_c')
        "backprop": np.array(
            [here.alpha**2 * here.mean_norm_sq * (here.gamma**2 + 1.0)] * (K - 1)
            + [here.alpha**2 * here.mean_norm_sq * (here.gamma - 1.0) ** 2]
        ),
        "feature_gram": np.full(K, n * here.mean_norm_sq),
    }
    basis = means_next.T[:, :, None] * means.T[:, None, :]
    gradient = (above.beta / K) * basis.reshape(K, -1).sum(axis=0)
    return TheoryPrediction(
        layer=l,
        K=K,
        n=n,
        conjectural=cache.relu,
        here=here,
        above=above,
        input_norm_sq=input_norm_sq,
        lambda_ratio=ratio,
        means=means,
        means_next=means_next,
        spectra=spectra,
        gradient=gradient,
    )


@dataclass(frozen=True)
class PredictedVectors:
    family: str
    vectors: np.ndarray
    values: np.ndarray


def predicted_eigvecs(prediction, family):
    """Unnormalised predicted eigenvectors (rows) for one matrix family."""
    K = prediction.K
    mu, mu_next = prediction.means.T, prediction.means_next.T
    val = prediction.spectra

    def kr(a, b):
        return np.outer(a, b).reshape(-1)

    if family == "hessian":
        vecs = [kr(mu_next[c], mu[cp]) for c in range(K) for cp in range(K)]
    elif family == "g_class":
        g = mu_next.mean(axis=0)
        vecs = [kr(g, mu[c]) for c in range(K)]
    elif family == "g_cross":
        vecs = [kr(mu_next[0] - mu_next[cp], mu[c]) for cp in range(1, K) for c in range(K)]
    elif family == "grad_cov":
        first = kr(mu_next[0], mu[0])
        vecs = [first - kr(mu_next[c], mu[c]) for c in range(1, K)]
    elif family == "backprop":
        g = mu.mean(axis=0)
        vecs = [mu[c] - g for c in range(K - 1)] + [g]
    elif family == "weight_gram":
        vecs = list(mu)
    elif family == "feature_gram":
        n = prediction.n
        vecs = [np.kron(np.eye(K)[c], np.ones(n)) for c in range(K)]
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return PredictedVectors(family, np.array(vecs), np.asarray(val[family]))


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonReport:
    family: str
    kind: str
    errors: np.ndarray
    max_error: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)


def subspace_projections(predicted, empirical):
    """Squared norm of the projection of each unit empirical column onto span(predicted rows).

    Also returns the principal angles (radians) between the two subspaces.
    """
    q_pred, s, _ = np.linalg.svd(np.asarray(predicted).T, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if s.size else 0
    q_pred = q_pred[:, :rank]
    emp = np.asarray(empirical)
    emp = emp / np.linalg.norm(emp, axis=0)
    proj = np.sum((q_pred.T @ emp) ** 2, axis=0)
    q_emp, _, _ = np.linalg.svd(emp, full_matrices=False)
    cosines = np.clip(np.linalg.svd(q_pred.T @ q_emp, compute_uv=False), -1.0, 1.0)
    return proj, np.arccos(cosines)


def compare(prediction, empirical, family, tol=1e-2, require_count=True):
    """Compare one predicted family with a measured object.

    ``empirical`` may be a :class:`SpectralSummary` (relative eigenvalue errors
    over the predicted count, plus the outlier count unless ``require_count``
    is False), a flattened gradient
    (``1 - cosine``), or the natural-basis :class:`AlignmentReport` of the
    gradient (absolute error against ``1/K`` on the diagonal, ``0`` elsewhere).
    """
    if isinstance(empirical, SpectralSummary):
        pred = np.sort(np.asarray(prediction.spectra[family]))[::-1]
        m = len(pred)
        emp = empirical.eigenvalues[:m]
        if len(emp) < m:
            raise ValueError(f"{family}: empirical spectrum shorter than the {m} predicted values")
        errors = np.abs(emp - pred) / np.maximum(np.abs(pred), 1e-300)
        max_err = float(errors.max())
        count_ok = empirical.outlier_count == m or not require_count
        detail = {"predicted": pred, "empirical": emp, "outlier_count": empirical.outlier_count}
        return ComparisonReport(family, "spectrum", errors, max_err, tol, bool(max_err <= tol and count_ok), detail)
    if isinstance(empirical, AlignmentReport):
        K = prediction.K
        if empirical.values.shape != (K, K):
            raise ValueError(f"expected a {K}x{K} grid, got {empirical.values.shape}")
        expected = np.eye(K) / K
        errors = np.abs(empirical.values - expected)
        max_err = float(np.nanmax(errors))
        return ComparisonReport(family, "grid", errors, max_err, tol, bool(max_err <= tol))
    vec = np.asarray(empirical, dtype=np.float64)
    pred = prediction.gradient
    if vec.shape != pred.shape:
        raise ValueError(f"{family}: shape mismatch {vec.shape} vs {pred.shape}")
    cos = float(vec @ pred / (np.linalg.norm(vec) * np.linalg.norm(pred)))
    scale = float(np.linalg.norm(vec) / np.linalg.norm(pred))
    err = 1.0 - cos
    return ComparisonReport(family, "vector", np.array([err]), err, tol, bool(err <= tol), {"cosine": cos, "norm_ratio": scale})
