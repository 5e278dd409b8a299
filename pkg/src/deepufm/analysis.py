"""Layer-wise matrices of a trained model and summaries of their spectra.

Every builder takes a :class:`~deepufm.model.LayerCache`; the activation mode
is read from the cache. Layer ``l`` refers to the weight ``W_l``, whose input
features are ``cache.x(l)`` and whose downstream product is ``A^(l+1)``. In
ReLU mode the natural-basis vectors use post-activation class means.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numerics import flatten, kron, sym_eig
from .training import backprop_signal, gradient_update_term

DEFAULT_TAU_REL = 1e-3
DEFAULT_ABS_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------


class OutlierPartition(NamedTuple):
    count: int
    threshold: float
    gap_index: int


def outlier_partition(values, tau_rel=DEFAULT_TAU_REL, abs_floor=DEFAULT_ABS_FLOOR):
    """Count the leading values above ``tau_rel * max(values[0], abs_floor)``.

    ``gap_index`` is the position of the largest ratio between consecutive
    values (values floored at ``abs_floor``), i.e. the size of the top group
    a purely gap-based rule would pick.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty spectrum")
    if np.any(np.diff(v) > 1e-12 * max(1.0, abs(v[0]))):
        raise ValueError("values must be sorted in descending order")
    threshold = tau_rel * max(v[0], abs_floor)
    count = int(np.sum(v > threshold))
    if v.size > 1:
        logs = np.log(np.maximum(v, abs_floor))
        gap_index = int(np.argmax(logs[:-1] - logs[1:])) + 1
    else:
        gap_index = 1
    return OutlierPartition(count, threshold, gap_index)


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: np.ndarray
    outlier_count: int
    gap_index: int
    vectors: Optional[np.ndarray] = None

    @property
    def outlier_values(self):
        return self.eigenvalues[: self.outlier_count]

    @property
    def bulk_edge(self):
        if self.outlier_count >= len(self.eigenvalues):
            return float("nan")
        return float(self.eigenvalues[self.outlier_count])

    def outlier_spread(self):
        """Relative spread ``(max - min) / max`` of the outliers."""
        out = self.outlier_values
        if out.size == 0:
            return 0.0
        return float((out[0] - out[-1]) / out[0])


def summarize(values, vectors=None, tau_rel=DEFAULT_TAU_REL, abs_floor=DEFAULT_ABS_FLOOR):
    values = np.asarray(values, dtype=np.float64)
    part = outlier_partition(values, tau_rel, abs_floor)
    return SpectralSummary(values, part.count, part.gap_index, vectors)


def spectrum(matrix, keep_vectors=0, tau_rel=DEFAULT_TAU_REL, abs_floor=DEFAULT_ABS_FLOOR):
    """Eigenvalues of a symmetric matrix, optionally with the top ``keep_vectors`` eigenvectors."""
    es = sym_eig(matrix, vectors=keep_vectors > 0)
    vecs = es.vectors[:, :keep_vectors].copy() if keep_vectors > 0 else None
    return summarize(es.values, vecs, tau_rel, abs_floor)


# ---------------------------------------------------------------------------
# Hessian and its cross-class decomposition
# ---------------------------------------------------------------------------


def _check_layer(cache, l):
    if not 1 <= l <= cache.L:
        raise ValueError(f"layer {l} outside 1..{cache.L}")


def layer_means(cache, l):
    """Class means of the layer-``l`` input features, shape ``(width, K)``."""
    return cache.class_means(l, post=True)


def sample_vectors(cache, l):
    """``v_icc' = a_c' ⊗ x_ic`` arranged as ``(K, n, K, D)`` (class, sample, row, coordinate)."""
    _check_layer(cache, l)
    tails = cache.sample_tails(l + 1)
    x = cache.x(l).T
    v = tails[:, :, :, None] * x[:, None, None, :]
    K, n = cache.K, cache.n
    return v.reshape(K, n, K, -1)


def hessian_layer(cache, l):
    """Hessian of the unregularised loss with respect to the flattened ``W_l``.

    Linear mode uses the Kronecker form ``A^T A ⊗ Av{x x^T}``; ReLU mode
    averages the per-sample products ``Ã^T Ã ⊗ σ(h) σ(h)^T``.
    """
    _check_layer(cache, l)
    x = cache.x(l)
    N = cache.num_samples
    if not cache.relu:
        a = cache.tail(l + 1)
        return kron(a.T @ a, x @ x.T / N)
    v = sample_vectors(cache, l).reshape(N * cache.K, -1)
    return v.T @ v / N


def papyan_components(cache, l):
    """``(G_class, G_cross, G_within)``; they sum to the layer Hessian exactly."""
    v = sample_vectors(cache, l)
    K, n = cache.K, cache.n
    D = v.shape[-1]
    v_cc = v.mean(axis=1)
    v_c = v_cc.mean(axis=1)
    g_class = v_c.T @ v_c
    cross = (v_cc - v_c[:, None, :]).reshape(K * K, D)
    g_cross = cross.T @ cross / K
    within = (v - v_cc[:, None, :, :]).reshape(K * n * K, D)
    g_within = within.T @ within / (K * n)
    return g_class, g_cross, g_within


def component_overlap(cache, l):
    """``||G_class G_cross||_F / (||G_class||_F ||G_cross||_F)``, zero when the images are orthogonal.

    Evaluated through the small factor Gram matrices, so no ``D x D`` product is formed.
    """
    v = sample_vectors(cache, l)
    K = cache.K
    v_cc = v.mean(axis=1)
    v_c = v_cc.mean(axis=1)
    cross = (v_cc - v_c[:, None, :]).reshape(K * K, -1)
    m = v_c @ cross.T
    gc = v_c @ v_c.T
    gx = cross @ cross.T
    num = float(np.trace(m.T @ gc @ m @ gx)) / K**2
    den = float(np.sum(gc * gc) * np.sum(gx * gx)) / K**2
    if den <= 0:
        return 0.0
    return float(np.sqrt(max(num, 0.0) / den))


@dataclass(frozen=True)
class DecompositionReport:
    spectra: dict
    residual: float
    hessian_norm: float

    @property
    def relative_residual(self):
        return self.residual / self.hessian_norm if self.hessian_norm > 0 else self.residual

    def outlier_counts(self):
        return {k: s.outlier_count for k, s in self.spectra.items()}


KNOCKOUTS = ("none", "class", "cross", "within")


def knockout_spectra(cache, l, tau_rel=DEFAULT_TAU_REL, abs_floor=DEFAULT_ABS_FLOOR, keep_vectors=0, hess=None):
    """Spectra of ``Hess_l`` and of ``Hess_l`` minus each decomposition component."""
    if hess is None:
        hess = hessian_layer(cache, l)
    comps = dict(zip(KNOCKOUTS[1:], papyan_components(cache, l)))
    norm = float(np.linalg.norm(hess))
    total = comps["class"] + comps["cross"] + comps["within"]
    total -= hess
    residual = float(np.linalg.norm(total))
    del total
    spectra = {"none": spectrum(hess, keep_vectors, tau_rel, abs_floor)}
    for name in KNOCKOUTS[1:]:
        spectra[name] = spectrum(hess - comps.pop(name), 0, tau_rel, abs_floor)
    return DecompositionReport(spectra, residual, norm)


# ---------------------------------------------------------------------------
# Alignment with the natural basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentReport:
    values: np.ndarray
    defined: np.ndarray
    mode: str


def natural_basis(cache, l):
    """Rows ``μ_c^(l+1) ⊗ μ_c'^(l)`` in order ``c * K + c'``."""
    mu_next = layer_means(cache, l + 1)
    mu = layer_means(cache, l)
    K = cache.K
    basis = mu_next.T[:, None, :, None] * mu.T[None, :, None, :]
    return basis.reshape(K * K, -1)


def hessian_alignment(cache, l, hess=None):
    """Grid ``f[c, c']``: squared cosine between ``v`` and ``Hess v`` for ``v = μ_c^(l+1) ⊗ μ_c'^(l)``.

    Entries whose vector or image vanishes are NaN with ``defined`` False.
    """
    if hess is None:
        hess = hessian_layer(cache, l)
    basis = natural_basis(cache, l)
    image = basis @ hess
    num = np.einsum("ij,ij->i", basis, image) ** 2
    den = np.einsum("ij,ij->i", basis, basis) * np.einsum("ij,ij->i", image, image)
    defined = den > 0
    f = np.full(num.shape, np.nan)
    f[defined] = num[defined] / den[defined]
    K = cache.K
    return AlignmentReport(f.reshape(K, K), defined.reshape(K, K), "natural")


def gradient_alignment(cache, l, basis="natural", grad=None, eigvecs=None):
    """Squared-cosine coefficients of the update term ``g̃`` of layer ``l``.

    ``basis="natural"`` gives the ``K x K`` grid against ``μ_c^(l+1) ⊗ μ_c'^(l)``.
    ``basis="eigen"`` gives one coefficient per column of ``eigvecs``
    (the Hessian eigenvectors, computed when not supplied).
    """
    g = gradient_update_term(cache, l) if grad is None else np.asarray(grad, dtype=np.float64)
    gg = float(g @ g)
    if basis == "natural":
        vecs = natural_basis(cache, l)
        shape = (cache.K, cache.K)
    elif basis == "eigen":
        if eigvecs is None:
            eigvecs = sym_eig(hessian_layer(cache, l)).vectors
        vecs = eigvecs.T
        shape = (vecs.shape[0],)
    else:
        raise ValueError(f"unknown basis {basis!r}")
    norms = np.einsum("ij,ij->i", vecs, vecs)
    defined = (norms > 0) & (gg > 0)
    coef = np.zeros(len(vecs))
    proj = vecs @ g
    coef[defined] = proj[defined] ** 2 / (norms[defined] * gg)
    return AlignmentReport(coef.reshape(shape), defined.reshape(shape), basis)


# ---------------------------------------------------------------------------
# Other layer-wise matrices
# ---------------------------------------------------------------------------


def weight_gram(state, l):
    w = state.W[l - 1]
    return w.T @ w


def weight_gram_spectrum(state, l, tau_rel=DEFAULT_TAU_REL, abs_floor=DEFAULT_ABS_FLOOR, keep_vectors=0):
    if not 1 <= l <= state.L:
        raise ValueError(f"layer {l} outside 1..{state.L}")
    return spectrum(weight_gram(state, l), keep_vectors, tau_rel, abs_floor)


def gram_relation_residuals(state, cfg):
    """Relative Frobenius gaps in ``λ_l W_l^T W_l = λ_{l-1} W_{l-1} W_{l-1}^T`` (and ``H1`` at l=1).

    Returns ``{l: residual}``; all vanish at a stationary point.
    """
    out = {}
    for l in range(1, cfg.L + 1):
        lhs = cfg.lambda_W[l - 1] * weight_gram(state, l)
        if l == 1:
            rhs = cfg.lambda_H1 * state.H1 @ state.H1.T
        else:
            prev = state.W[l - 2]
            rhs = cfg.lambda_W[l - 2] * prev @ prev.T
        scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs))
        out[l] = float(np.linalg.norm(lhs - rhs) / scale) if scale > 0 else 0.0
    return out


def per_sample_gradients(cache, l):
    """Regulariser-free per-sample gradients ``(A^T u_ic) ⊗ x_ic`` as rows of a ``(Kn, D)`` array."""
    _check_layer(cache, l)
    delta = backprop_signal(cache, l)
    x = cache.x(l).T
    return (delta[:, :, None] * x[:, None, :]).reshape(cache.num_samples, -1)


def gradient_covariance(cache, l):
    g = per_sample_gradients(cache, l)
    centred = g - g.mean(axis=0)
    return centred.T @ centred / cache.num_samples


def backprop_error_moment(cache, l):
    """``(1/Kn) Σ_{i,c,c'} δ_icc' δ_icc'^T`` with ``δ_icc' = A^(l)^T (z_ic - y_c')``."""
    _check_layer(cache, l)
    K, N = cache.K, cache.num_samples
    tails = cache.sample_tails(l)
    diff = cache.outputs.T[:, None, :] - np.eye(K)[None, :, :]
    delta = np.einsum("skd,sjk->sjd", tails, diff).reshape(N * K, -1)
    return delta.T @ delta / N


def feature_gram(cache, l):
    """``X^T X`` of the layer-``l`` input features, ``Kn x Kn``."""
    x = cache.x(l)
    return x.T @ x


class FrameReport(NamedTuple):
    r: np.ndarray
    r_tilde: Optional[np.ndarray]


def frame_diagnostics(cache, l):
    """``|a_c' · a_c''|`` for the rows of ``W_L ... W_{l+1}``; ReLU mode adds the per-sample average."""
    _check_layer(cache, l)
    state = cache.state
    a = np.eye(cache.K)
    for j in range(cache.L, l, -1):
        a = a @ state.W[j - 1]
    r = np.abs(a @ a.T)
    r_tilde = None
    if cache.relu:
        t = cache.tail(l + 1)
        r_tilde = np.abs(np.matmul(t, t.transpose(0, 2, 1))).mean(axis=0)
    return FrameReport(r, r_tilde)


def flattened_weight(state, l):
    return flatten(state.W[l - 1])
