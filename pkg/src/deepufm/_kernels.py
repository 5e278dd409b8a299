"""Hot loops with a numba path and a pure-numpy fallback.

Set ``DEEPUFM_DISABLE_NUMBA=1`` before import to force the numpy versions
(also used automatically when numba is not importable). Both paths are kept
importable under explicit names so tests and ``benchmarks/`` can compare them.
"""

import os

import numpy as np

_DISABLED = os.environ.get("DEEPUFM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by DEEPUFM_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorate(func):
            return func

        return decorate


_EPS = np.finfo(np.float64).eps


# ---------------------------------------------------------------------------
# Cyclic Jacobi eigensolver
# ---------------------------------------------------------------------------


def _off_norm_py(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


@njit(cache=True)
def _off_norm_nb(a):
    n = a.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return np.sqrt(s)


@njit(cache=True)
def _jacobi_cyclic_nb(s, tol, max_sweeps):
    n = s.shape[0]
    a = s.copy()
    v = np.eye(n)
    norm_f = np.sqrt(np.sum(a * a))
    off = _off_norm_nb(a)
    target = max(tol * off, _EPS * norm_f)
    sweeps = 0
    while off > target and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / abs(theta)
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - sn * akq
                    a[k, q] = sn * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - sn * aqk
                    a[q, k] = sn * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - sn * vkq
                    v[k, q] = sn * vkp + c * vkq
        sweeps += 1
        off = _off_norm_nb(a)
    return np.diag(a).copy(), v, off, sweeps


def _round_robin(m):
    """Pairings for ``m`` (even) players: ``m - 1`` rounds of ``m // 2`` disjoint pairs."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array(players[: m // 2])
        q = np.array(players[m // 2 :][::-1])
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_parallel_np(s, tol, max_sweeps):
    # Same rotation formulas, but each round applies m/2 disjoint rotations at once.
    n = s.shape[0]
    m = n + (n % 2)
    a = np.zeros((m, m))
    a[:n, :n] = s
    v = np.eye(m)
    norm_f = np.sqrt(np.sum(a * a))
    off = _off_norm_py(a)
    target = max(tol * off, _EPS * norm_f)
    rounds = _round_robin(m)
    sweeps = 0
    while off > target and sweeps < max_sweeps:
        for p, q in rounds:
            apq = a[p, q]
            live = apq != 0.0
            safe = np.where(live, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            # for huge theta, t ~ 1/(2 theta) without squaring
            big = np.abs(theta) > 1e150
            tb = np.where(big, 1.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), np.sign(tb) / (np.abs(tb) + np.sqrt(tb * tb + 1.0)))
            t = np.where(theta == 0.0, 1.0, t)
            c = np.where(live, 1.0 / np.sqrt(t * t + 1.0), 1.0)
            sn = np.where(live, t * c, 0.0)
            ap, aq = a[:, p], a[:, q]
            a[:, p] = ap * c - aq * sn
            a[:, q] = ap * sn + aq * c
            ap, aq = a[p, :], a[q, :]
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p] = vp * c - vq * sn
            v[:, q] = vp * sn + vq * c
        sweeps += 1
        off = _off_norm_py(a)
    return np.diag(a)[:n].copy(), v[:n, :n].copy(), off, sweeps


def jacobi_eigh_numba(s, tol=1e-12, max_sweeps=100):
    return _jacobi_cyclic_nb(np.ascontiguousarray(s, dtype=np.float64), tol, max_sweeps)


def jacobi_eigh_numpy(s, tol=1e-12, max_sweeps=100):
    return _jacobi_parallel_np(np.asarray(s, dtype=np.float64), tol, max_sweeps)


# ---------------------------------------------------------------------------
# Kronecker product by the index law
# ---------------------------------------------------------------------------


@njit(cache=True)
def _kron_nb(a, b):
    p1, q1 = a.shape
    p2, q2 = b.shape
    out = np.empty((p1 * p2, q1 * q2))
    for x in range(p1):
        for u in range(q1):
            axu = a[x, u]
            for y in range(p2):
                for v in range(q2):
                    out[p2 * x + y, q2 * u + v] = axu * b[y, v]
    return out


def kron_numba(a, b):
    return _kron_nb(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))


def kron_numpy(a, b):
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


# ---------------------------------------------------------------------------
# Per-sample masked tail products  T_l = T_{l+1} @ W_l @ diag(mask_l)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _masked_tail_nb(tail, w, mask):
    ns, k, m = tail.shape
    d = w.shape[1]
    out = np.zeros((ns, k, d))
    for s in range(ns):
        prod = np.dot(tail[s], w)
        for r in range(k):
            for j in range(d):
                if mask[s, j]:
                    out[s, r, j] = prod[r, j]
    return out


def masked_tail_numba(tail, w, mask):
    return _masked_tail_nb(
        np.ascontiguousarray(tail, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.bool_),
    )


def masked_tail_numpy(tail, w, mask):
    return np.where(mask[:, None, :], np.matmul(tail, w), 0.0)


# ---------------------------------------------------------------------------
# One full-batch forward/backward pass, flattened over layers
# ---------------------------------------------------------------------------


@njit(cache=True)
def _loss_and_grads_nb(h1, ws, w_last, y, lam_w, lam_h, relu):
    # ws: (L-1, d, d) hidden weights, w_last: (K, d)
    nl = ws.shape[0]
    ns = h1.shape[1]
    d = h1.shape[0]
    xs = np.empty((nl + 1, d, ns))
    pos = np.zeros((nl + 1, d, ns), dtype=np.bool_)
    xs[0] = h1
    for j in range(nl):
        h = np.dot(ws[j], xs[j])
        if relu:
            for a in range(d):
                for b in range(ns):
                    if h[a, b] > 0.0:
                        pos[j + 1, a, b] = True
                        xs[j + 1, a, b] = h[a, b]
                    else:
                        xs[j + 1, a, b] = 0.0
        else:
            xs[j + 1] = h
    z = np.dot(w_last, xs[nl])
    r = z - y
    fit = 0.5 * np.sum(r * r) / ns
    reg = 0.5 * lam_w[nl] * np.sum(w_last * w_last) + 0.5 * lam_h * np.sum(h1 * h1)
    for j in range(nl):
        reg += 0.5 * lam_w[j] * np.sum(ws[j] * ws[j])
    g = r / ns
    g_last = np.dot(g, xs[nl].T) + lam_w[nl] * w_last
    g = np.dot(w_last.T, g)
    g_ws = np.empty_like(ws)
    for j in range(nl - 1, -1, -1):
        if relu:
            for a in range(d):
                for b in range(ns):
                    if not pos[j + 1, a, b]:
                        g[a, b] = 0.0
        g_ws[j] = np.dot(g, xs[j].T) + lam_w[j] * ws[j]
        g = np.dot(ws[j].T, g)
    g_h = g + lam_h * h1
    return fit + reg, g_h, g_ws, g_last


def loss_and_grads_numba(h1, ws, w_last, y, lam_w, lam_h, relu):
    return _loss_and_grads_nb(h1, ws, w_last, y, lam_w, lam_h, relu)


def loss_and_grads_numpy(h1, ws, w_last, y, lam_w, lam_h, relu):
    nl = ws.shape[0]
    ns = h1.shape[1]
    xs = [h1]
    masks = [None]
    for j in range(nl):
        h = ws[j] @ xs[-1]
        if relu:
            m = h > 0.0
            masks.append(m)
            xs.append(np.where(m, h, 0.0))
        else:
            masks.append(None)
            xs.append(h)
    z = w_last @ xs[-1]
    r = z - y
    fit = 0.5 * np.sum(r * r) / ns
    reg = 0.5 * lam_w[nl] * np.sum(w_last * w_last) + 0.5 * lam_h * np.sum(h1 * h1)
    for j in range(nl):
        reg += 0.5 * lam_w[j] * np.sum(ws[j] * ws[j])
    g = r / ns
    g_last = g @ xs[nl].T + lam_w[nl] * w_last
    g = w_last.T @ g
    g_ws = np.empty_like(ws)
    for j in range(nl - 1, -1, -1):
        if relu:
            g = np.where(masks[j + 1], g, 0.0)
        g_ws[j] = g @ xs[j].T + lam_w[j] * ws[j]
        g = ws[j].T @ g
    g_h = g + lam_h * h1
    return fit + reg, g_h, g_ws, g_last


if NUMBA_AVAILABLE:
    jacobi_eigh = jacobi_eigh_numba
    kron = kron_numba
    masked_tail = masked_tail_numba
    loss_and_grads = loss_and_grads_numba
else:
    jacobi_eigh = jacobi_eigh_numpy
    kron = kron_numpy
    masked_tail = masked_tail_numpy
    loss_and_grads = loss_and_grads_numpy

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"
