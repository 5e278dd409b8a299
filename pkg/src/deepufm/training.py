"""Analytic gradients, full-batch gradient descent and the within/between collapse metric."""

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .model import build_labels, forward, init_state, reg_gate, ModelState
from .numerics import pinv, flatten, DEFAULT_PINV_CUTOFF

log = logging.getLogger(__name__)

COLLAPSE_THRESHOLD = 1e-3
DIVERGENCE_FACTOR = 1e6
# between-class spread (trace of Σ_B) at or below this counts as the trivial all-equal solution
TRIVIAL_SPREAD = 1e-20
# weights of dead ReLU units decay geometrically into the subnormal range,
# where arithmetic is many times slower; such entries are set to zero
SUBNORMAL = np.finfo(np.float64).tiny


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss, initial_loss):
        super().__init__(
            f"loss {loss:.3e} at epoch {epoch} exceeds {DIVERGENCE_FACTOR:.0e} x initial loss "
            f"{initial_loss:.3e}; lower the learning rate"
        )
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class GradientSet:
    dH1: np.ndarray
    dW: tuple

    def norm(self):
        return float(np.sqrt(sum(np.sum(g * g) for g in (self.dH1, *self.dW))))


def _check_cache(state, cache):
    if cache.state is state:
        return
    same = len(cache.state.W) == len(state.W) and all(
        a.shape == b.shape and np.array_equal(a, b) for a, b in zip(cache.state.params(), state.params())
    )
    if not same:
        raise ValueError("cache was not produced by forward() on this state")


def gradients(state, cache, cfg):
    """Exact gradient of the regularised loss by reverse accumulation.

    In ReLU mode the backward signal is masked with ``1(h > 0)`` at every
    rectified layer; ``H1`` itself is not rectified.
    """
    _check_cache(state, cache)
    N = cfg.num_samples
    g = cache.residuals / N
    dW = [None] * cfg.L
    for l in range(cfg.L, 0, -1):
        dW[l - 1] = g @ cache.x(l).T + cfg.lambda_W[l - 1] * state.W[l - 1]
        g = state.W[l - 1].T @ g
        mask = cache.masks[l - 1]
        if mask is not None:
            g = np.where(mask, g, 0.0)
    dH1 = g + cfg.lambda_H1 * state.H1
    return GradientSet(dH1, tuple(dW))


def backprop_signal(cache, l):
    """Per-sample ``A^(l+1)^T u_ic`` as a ``(Kn, width)`` array."""
    tails = cache.tail(l + 1)
    if tails.ndim == 2:
        return (tails.T @ cache.residuals).T
    return np.einsum("skd,ks->sd", tails, cache.residuals)


def gradient_update_term(cache, l):
    """Regulariser-free layer-``l`` gradient ``Av_ic{(A^(l+1)^T u_ic) ⊗ x_ic}``, flattened."""
    if not 1 <= l <= cache.L:
        raise ValueError(f"layer {l} outside 1..{cache.L}")
    delta = backprop_signal(cache, l)
    return flatten(delta.T @ cache.x(l).T / cache.num_samples)


class DNC1(NamedTuple):
    value: float
    degenerate: bool


def scatter_matrices(features, K, n):
    """Within-class and between-class covariance of the columns of ``features``."""
    d = features.shape[0]
    means = features.reshape(d, K, n).mean(axis=2)
    centred = (features.reshape(d, K, n) - means[:, :, None]).reshape(d, K * n)
    sigma_w = centred @ centred.T / (K * n)
    spread = means - means.mean(axis=1, keepdims=True)
    sigma_b = spread @ spread.T / K
    return sigma_w, sigma_b


def dnc1_metric(cache, l, rel_cutoff=DEFAULT_PINV_CUTOFF):
    """``||Σ_W Σ_B^+||_F^2`` on the layer-``l`` features ``h^(l)``.

    A vanishing between-class covariance gives ``m = 0`` with ``degenerate``
    set, since that is the all-means-equal (trivial) configuration.
    """
    sigma_w, sigma_b = scatter_matrices(cache.h(l), cache.K, cache.n)
    degenerate = float(np.trace(sigma_b)) <= TRIVIAL_SPREAD
    if degenerate:
        return DNC1(0.0, True)
    prod = sigma_w @ pinv(sigma_b, rel_cutoff)
    return DNC1(float(np.sum(prod * prod)), False)


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    grad_norm: float
    dnc1: dict


@dataclass
class TrainLog:
    gate: tuple
    probe_layers: tuple
    records: list = field(default_factory=list)
    increase_events: list = field(default_factory=list)
    converged: bool = False
    final_epoch: int = 0
    collapsed: bool = False

    def last(self):
        return self.records[-1]


def train(cfg, state=None, probe_layers=None, snapshot_epochs=(), on_snapshot=None):
    """Full-batch gradient descent with a fixed step until ``grad_tol`` or ``max_epochs``.

    Epoch ``e`` refers to the parameters after ``e`` updates. The log gets a
    row every ``eval_every`` epochs plus the final epoch. ``on_snapshot`` is
    called as ``on_snapshot(epoch, state)`` for each epoch in
    ``snapshot_epochs`` that is reached.
    """
    gate = reg_gate(cfg)
    if not gate.passed:
        warnings.warn(
            f"regularisation gate fails ({gate.lhs:.4g} >= {gate.rhs:.4g}); "
            "the optimum is expected to be the all-zero solution",
            stacklevel=2,
        )
    if state is None:
        state = init_state(cfg)
    state.check(cfg)
    if probe_layers is None:
        probe_layers = tuple(range(1, cfg.L + 1))
    probe_layers = tuple(probe_layers)
    snapshots = set(int(e) for e in snapshot_epochs)

    h1 = state.H1.copy()
    ws = np.stack(state.W[:-1]) if cfg.L > 1 else np.zeros((0, cfg.d, cfg.d))
    w_last = state.W[-1].copy()
    y = build_labels(cfg.K, cfg.n)
    lam_w = np.asarray(cfg.lambda_W, dtype=np.float64)
    tlog = TrainLog(gate=gate, probe_layers=probe_layers)

    def current():
        return ModelState(h1.copy(), tuple(ws[j].copy() for j in range(ws.shape[0])) + (w_last.copy(),))

    initial_loss = None
    prev_loss = None
    epoch = 0
    while True:
        value, g_h, g_ws, g_last = _kernels.loss_and_grads(h1, ws, w_last, y, lam_w, cfg.lambda_H1, cfg.relu)
        if not np.isfinite(value):
            raise TrainingDiverged(epoch, value, initial_loss if initial_loss is not None else value)
        if initial_loss is None:
            initial_loss = value
        elif value > DIVERGENCE_FACTOR * max(initial_loss, 1e-300):
            raise TrainingDiverged(epoch, value, initial_loss)
        if prev_loss is not None and value > prev_loss:
            tlog.increase_events.append(epoch)
        prev_loss = value
        gnorm = float(np.sqrt(np.sum(g_h * g_h) + np.sum(g_ws * g_ws) + np.sum(g_last * g_last)))
        done = gnorm <= cfg.grad_tol or epoch >= cfg.max_epochs

        if epoch in snapshots and on_snapshot is not None:
            on_snapshot(epoch, current())
        if epoch % cfg.eval_every == 0 or done:
            cache = forward(current(), cfg)
            dnc = {l: dnc1_metric(cache, l) for l in probe_layers}
            tlog.records.append(TrainRecord(epoch, value, gnorm, dnc))
            log.debug("epoch %d loss %.6e grad %.3e", epoch, value, gnorm)
        if done:
            tlog.converged = gnorm <= cfg.grad_tol
            break
        h1 -= cfg.lr * g_h
        ws -= cfg.lr * g_ws
        w_last -= cfg.lr * g_last
        for a in (h1, ws, w_last):
            _flush_subnormal(a)
        epoch += 1

    tlog.final_epoch = epoch
    tlog.collapsed = is_collapsed(tlog.last().dnc1)
    return current(), tlog


def _flush_subnormal(a):
    tiny = np.abs(a) < SUBNORMAL
    if tiny.any():
        a[tiny] = 0.0


def is_collapsed(dnc1, threshold=COLLAPSE_THRESHOLD):
    """Saddle guard: every probed layer has ``m <= threshold`` and separated means."""
    return bool(dnc1) and all((not r.degenerate) and r.value <= threshold for r in dnc1.values())
