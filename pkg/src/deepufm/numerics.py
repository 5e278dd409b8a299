"""Dense linear-algebra substrate shared by the rest of the package.

Matrices are plain 2-D float64 ``numpy`` arrays. Column vectors produced by
:func:`flatten` are 1-D arrays. All randomness flows through
:func:`make_rng`, which wraps numpy's PCG64 bit generator.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels

DEFAULT_PINV_CUTOFF = 1e-8
JACOBI_MAX_DIM = 256
JACOBI_MAX_SWEEPS = 100


class ConvergenceError(RuntimeError):
    """Raised when the eigensolver stops before reaching its tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (achieved residual {residual:.3e})")
        self.residual = residual


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def kron(a, b):
    """Kronecker product with ``(A⊗B)[p2*x + y, q2*u + v] = A[x, u] * B[y, v]``."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > np.iinfo(np.intp).max // 8:
        raise OverflowError(f"kron result {rows}x{cols} is too large")
    return _kernels.kron(a, b)


def flatten(w):
    """Row-major vectorisation: entry ``(x, y)`` lands at ``cols * x + y``."""
    return as_matrix(w, "W").reshape(-1).copy()


def unflatten(w, rows, cols):
    w = np.asarray(w, dtype=np.float64)
    if w.size != rows * cols:
        raise ValueError(f"cannot reshape {w.size} entries into {rows}x{cols}")
    return w.reshape(rows, cols).copy()


@dataclass(frozen=True)
class EigenSystem:
    values: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.values)


def _check_symmetric(s, tol):
    s = as_matrix(s, "S")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))))
    asym = float(np.max(np.abs(s - s.T)))
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric: max |S - S^T| = {asym:.3e}")
    return 0.5 * (s + s.T)


def sym_eig(s, tol=1e-10, method="auto", vectors=True):
    """Eigen-decomposition of a symmetric matrix, values sorted descending.

    ``method`` is ``"jacobi"`` (cyclic Jacobi rotations), ``"lapack"``
    (``numpy.linalg.eigh``) or ``"auto"``, which uses Jacobi up to
    ``JACOBI_MAX_DIM`` rows and LAPACK above that. With ``vectors=False`` only
    the values are computed and ``EigenSystem.vectors`` is ``None``.
    """
    s = _check_symmetric(s, tol)
    n = s.shape[0]
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        vals, vecs, off, sweeps = _kernels.jacobi_eigh(s, 1e-12, JACOBI_MAX_SWEEPS)
        if sweeps >= JACOBI_MAX_SWEEPS:
            raise ConvergenceError("Jacobi iteration did not converge", off)
    elif method == "lapack":
        if vectors:
            vals, vecs = np.linalg.eigh(s)
        else:
            vals, vecs = np.linalg.eigvalsh(s), None
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order] if (vectors and vecs is not None) else None
    return EigenSystem(vals, vecs)


def eigvals_desc(s, tol=1e-10, method="auto"):
    return sym_eig(s, tol=tol, method=method, vectors=False).values


def pinv(s, rel_cutoff=DEFAULT_PINV_CUTOFF, tol=1e-10):
    """Moore–Penrose pseudo-inverse of a symmetric PSD matrix.

    Eigenvalues at or below ``rel_cutoff * λ_max`` are treated as zero.
    """
    es = sym_eig(s, tol=tol)
    top = es.values[0] if len(es) else 0.0
    if top <= 0.0:
        return np.zeros_like(np.asarray(s, dtype=np.float64))
    keep = es.values > rel_cutoff * top
    v = es.vectors[:, keep]
    return (v / es.values[keep]) @ v.T


class ScaleFit(NamedTuple):
    alpha: float
    residual: float


def fit_scale(a, b):
    """Least-squares scalar with ``A ≈ alpha * B`` and the relative residual."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    bb = float(np.sum(b * b))
    if bb == 0.0:
        raise ValueError("cannot fit a scale against an all-zero matrix")
    alpha = float(np.sum(a * b)) / bb
    na = float(np.linalg.norm(a))
    residual = float(np.linalg.norm(a - alpha * b)) / na if na > 0 else 0.0
    return ScaleFit(alpha, residual)


def make_rng(seed):
    """PCG64-backed generator; identical seeds give identical streams."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_matrix(rng, rows, cols, std):
    if std <= 0:
        raise ValueError("std must be positive")
    return rng.normal(0.0, std, size=(rows, cols))
