"""Deep linear and deep ReLU unconstrained feature models.

Samples are stored class-major: column ``c * n + i`` of ``H1`` is sample
``i`` of class ``c``. Layers are indexed from 1 as in the usual write-up of
the model, so ``W[0]`` is ``W_1`` and ``cache.h(1)`` is ``H1`` itself.

In ReLU mode the activation sits between separated layers only:
``z = W_L σ(W_{L-1} σ(... σ(W_1 H1)))``. The free features ``H1`` enter
``W_1`` unrectified.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .numerics import gaussian_matrix, make_rng

ACTIVATIONS = ("linear", "relu")


@dataclass(frozen=True)
class HyperConfig:
    K: int
    n: int
    d: int
    L: int
    lambda_H1: float
    lambda_W: tuple
    activation: str = "linear"
    lr: float = 0.5
    max_epochs: int = 100_000
    grad_tol: float = 1e-10
    eval_every: int = 100
    init_std: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        lam_w = self.lambda_W
        if np.isscalar(lam_w):
            lam_w = (float(lam_w),) * self.L
        object.__setattr__(self, "lambda_W", tuple(float(v) for v in lam_w))
        if self.init_std is None:
            object.__setattr__(self, "init_std", float(1.0 / np.sqrt(self.d)))
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.n < 1 or self.L < 1:
            raise ValueError("n and L must be at least 1")
        if self.d < self.K:
            raise ValueError(f"d={self.d} must be at least K={self.K}")
        if len(self.lambda_W) != self.L:
            raise ValueError(f"expected {self.L} weight regularisers, got {len(self.lambda_W)}")
        if self.lambda_H1 <= 0 or min(self.lambda_W) <= 0:
            raise ValueError("regularisation strengths must be strictly positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.lr < 0 or self.grad_tol <= 0 or self.init_std <= 0:
            raise ValueError("lr must be >= 0; grad_tol and init_std must be > 0")
        if self.max_epochs < 0 or self.eval_every < 1:
            raise ValueError("max_epochs must be >= 0 and eval_every >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def num_samples(self):
        return self.K * self.n

    @property
    def relu(self):
        return self.activation == "relu"

    def weight_shape(self, l):
        return (self.K, self.d) if l == self.L else (self.d, self.d)


@dataclass(frozen=True)
class ModelState:
    H1: np.ndarray
    W: tuple

    @property
    def L(self):
        return len(self.W)

    def params(self):
        return [self.H1, *self.W]

    def copy(self):
        return ModelState(self.H1.copy(), tuple(w.copy() for w in self.W))

    def check(self, cfg):
        if self.H1.shape != (cfg.d, cfg.num_samples):
            raise ValueError(f"H1 has shape {self.H1.shape}, expected {(cfg.d, cfg.num_samples)}")
        if len(self.W) != cfg.L:
            raise ValueError(f"expected {cfg.L} weight matrices, got {len(self.W)}")
        for l, w in enumerate(self.W, start=1):
            if w.shape != cfg.weight_shape(l):
                raise ValueError(f"W_{l} has shape {w.shape}, expected {cfg.weight_shape(l)}")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("state has non-finite entries")


def build_labels(K, n):
    """One-hot targets ``I_K ⊗ 1_n^T``."""
    return np.kron(np.eye(K), np.ones((1, n)))


def init_state(cfg, rng=None):
    """Draw ``H1`` then ``W_1 .. W_L`` i.i.d. N(0, init_std^2) from the seeded stream.

    Pass ``rng`` to read the generator state after the draws.
    """
    if rng is None:
        rng = make_rng(cfg.seed)
    h1 = gaussian_matrix(rng, cfg.d, cfg.num_samples, cfg.init_std)
    ws = tuple(gaussian_matrix(rng, *cfg.weight_shape(l), cfg.init_std) for l in range(1, cfg.L + 1))
    return ModelState(h1, ws)


def class_means(features, K, n):
    """``(rows, K)`` matrix of per-class column averages."""
    return features.reshape(features.shape[0], K, n).mean(axis=2)


@dataclass(frozen=True)
class LayerCache:
    """Forward quantities for every layer ``l = 1 .. L+1``.

    ``pre[l-1]`` is ``h^(l)`` (``h^(L+1)`` is the network output) and
    ``post[l-1]`` the input fed to ``W_l`` (``σ(h^(l))`` in ReLU mode for
    ``2 <= l <= L``, ``h^(l)`` otherwise). ``tails[l-1]`` is ``A^(l)``: a
    ``(K, width)`` matrix in linear mode, a ``(Kn, K, width)`` stack of
    per-sample masked products in ReLU mode. ``A^(L+1)`` is the identity.
    """

    state: ModelState
    activation: str
    K: int
    n: int
    targets: np.ndarray
    pre: list
    post: list
    masks: list
    tails: list
    outputs: np.ndarray
    residuals: np.ndarray
    _means: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def L(self):
        return len(self.pre) - 1

    @property
    def num_samples(self):
        return self.K * self.n

    @property
    def relu(self):
        return self.activation == "relu"

    def h(self, l):
        return self.pre[l - 1]

    def x(self, l):
        return self.post[l - 1]

    def tail(self, l):
        return self.tails[l - 1]

    def class_means(self, l, post=False):
        key = (l, post)
        if key not in self._means:
            feats = self.x(l) if post else self.h(l)
            self._means[key] = class_means(feats, self.K, self.n)
        return self._means[key]

    def global_mean(self, l, post=False):
        return self.class_means(l, post).mean(axis=1)

    def sample_tails(self, l):
        """``A^(l)`` broadcast to one copy per sample, shape ``(Kn, K, width)``."""
        t = self.tail(l)
        if t.ndim == 3:
            return t
        return np.broadcast_to(t, (self.num_samples,) + t.shape)


def forward(state, cfg):
    state.check(cfg)
    relu = cfg.relu
    L = cfg.L
    pre = [state.H1]
    post = [state.H1]
    masks = [None]
    for l in range(1, L + 1):
        h = state.W[l - 1] @ post[-1]
        pre.append(h)
        if relu and l < L:
            m = h > 0.0
            masks.append(m)
            post.append(np.where(m, h, 0.0))
        else:
            masks.append(None)
            post.append(h)
    z = post[-1]
    y = build_labels(cfg.K, cfg.n)

    tails = [None] * (L + 1)
    eye = np.eye(cfg.K)
    if relu:
        tails[L] = np.broadcast_to(eye, (cfg.num_samples, cfg.K, cfg.K)).copy()
        for l in range(L, 0, -1):
            mask = masks[l - 1]
            if mask is None:
                mask = np.ones_like(pre[l - 1], dtype=bool)
            tails[l - 1] = _kernels.masked_tail(tails[l], state.W[l - 1], mask.T)
    else:
        tails[L] = eye
        for l in range(L, 0, -1):
            tails[l - 1] = tails[l] @ state.W[l - 1]

    return LayerCache(
        state=state,
        activation=cfg.activation,
        K=cfg.K,
        n=cfg.n,
        targets=y,
        pre=pre,
        post=post,
        masks=masks,
        tails=tails,
        outputs=z,
        residuals=z - y,
    )


def regulariser(state, cfg):
    total = 0.5 * cfg.lambda_H1 * float(np.sum(state.H1**2))
    for lam, w in zip(cfg.lambda_W, state.W):
        total += 0.5 * lam * float(np.sum(w**2))
    return total


def fit_term(cache):
    return 0.5 * float(np.sum(cache.residuals**2)) / cache.num_samples


def loss(state, cfg, cache=None):
    if cache is None:
        cache = forward(state, cfg)
    return fit_term(cache) + regulariser(state, cfg)


class GateResult(NamedTuple):
    passed: bool
    lhs: float
    rhs: float


def reg_gate(cfg):
    """Regularisation level below which the global optimum is collapsed and nonzero.

    Compares ``(Kn * λ_{W_L} ... λ_{W_1} λ_{H1})^(1/L)`` against
    ``(L-1)^((L-1)/L) / (K L^2)``; passes only on strict inequality.
    """
    K, n, L = cfg.K, cfg.n, cfg.L
    log_prod = np.log(K * n) + np.log(cfg.lambda_H1) + float(np.sum(np.log(cfg.lambda_W)))
    lhs = float(np.exp(log_prod / L))
    rhs = float((L - 1) ** ((L - 1) / L) / (K * L**2))
    return GateResult(lhs < rhs, lhs, rhs)
