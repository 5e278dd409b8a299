import mpmath
import numpy as np
import pytest

from deepufm.model import HyperConfig, ModelState, build_labels, forward, init_state
from deepufm.training import gradients


def small_config(activation="linear", K=2, n=3, d=4, L=3, seed=0, **kw):
    kw.setdefault("lambda_H1", 1e-2)
    kw.setdefault("lambda_W", 1e-2)
    kw.setdefault("init_std", 0.7)
    return HyperConfig(K=K, n=n, d=d, L=L, activation=activation, seed=seed, **kw)


def random_state(cfg):
    return init_state(cfg)


def state_from_vector(vec, cfg):
    shapes = [(cfg.d, cfg.num_samples)] + [cfg.weight_shape(l) for l in range(1, cfg.L + 1)]
    out, pos = [], 0
    for r, c in shapes:
        out.append(np.asarray(vec[pos : pos + r * c], dtype=np.float64).reshape(r, c))
        pos += r * c
    return ModelState(out[0], tuple(out[1:]))


def state_to_vector(state):
    return np.concatenate([p.reshape(-1) for p in state.params()])


def mp_loss(params, cfg, dps=40):
    """Regularised loss evaluated with explicit loops in extended precision.

    ``params`` is a list of nested lists (or arrays) of mpf/float values in the
    order H1, W_1, ..., W_L. No numpy arithmetic is involved.
    """
    with mpmath.workdps(dps):
        mpf = mpmath.mpf
        h1 = [[mpf(v) for v in row] for row in params[0]]
        ws = [[[mpf(v) for v in row] for row in w] for w in params[1:]]
        N = cfg.num_samples
        K = cfg.K
        fit = mpf(0)
        for s in range(N):
            x = [h1[r][s] for r in range(len(h1))]
            for l, w in enumerate(ws, start=1):
                h = [mpmath.fsum(w[r][j] * x[j] for j in range(len(x))) for r in range(len(w))]
                if cfg.relu and l < cfg.L:
                    h = [v if v > 0 else mpf(0) for v in h]
                x = h
            c = s // cfg.n
            fit += mpmath.fsum((x[k] - (1 if k == c else 0)) ** 2 for k in range(K))
        reg = mpf(cfg.lambda_H1) / 2 * mpmath.fsum(v * v for row in h1 for v in row)
        for lam, w in zip(cfg.lambda_W, ws):
            reg += mpf(lam) / 2 * mpmath.fsum(v * v for row in w for v in row)
        return fit / (2 * N) + reg


def mp_gradient(state, cfg, step="1e-15", dps=40):
    """Central differences of :func:`mp_loss` at extended precision, one coordinate at a time."""
    with mpmath.workdps(dps):
        h = mpmath.mpf(step)
        base = [[[mpmath.mpf(float(v)) for v in row] for row in p] for p in state.params()]
        grads = []
        for k, p in enumerate(base):
            g = np.zeros((len(p), len(p[0])))
            for i in range(len(p)):
                for j in range(len(p[0])):
                    orig = p[i][j]
                    p[i][j] = orig + h
                    up = mp_loss(base, cfg, dps)
                    p[i][j] = orig - h
                    down = mp_loss(base, cfg, dps)
                    p[i][j] = orig
                    g[i, j] = float((up - down) / (2 * h))
            grads.append(g)
        return grads


def fd_hessian(state, cfg, l, step=1e-5):
    """Central differences of the analytic (regulariser-free) layer gradient."""
    w = state.W[l - 1]
    D = w.size
    out = np.zeros((D, D))

    def grad_at(flat):
        ws = list(state.W)
        ws[l - 1] = flat.reshape(w.shape)
        s = type(state)(state.H1, tuple(ws))
        g = gradients(s, forward(s, cfg), cfg).dW[l - 1]
        return (g - cfg.lambda_W[l - 1] * ws[l - 1]).reshape(-1)

    base = w.reshape(-1).copy()
    for j in range(D):
        e = np.zeros(D)
        e[j] = step
        out[:, j] = (grad_at(base + e) - grad_at(base - e)) / (2 * step)
    return out


def orthonormal_frame(rng, d, K, nonnegative=False):
    if nonnegative:
        # disjoint supports give orthonormal columns with nonnegative entries
        q = np.zeros((d, K))
        blocks = np.array_split(rng.permutation(d), K)
        for c, idx in enumerate(blocks):
            v = rng.uniform(0.5, 1.5, size=len(idx))
            q[idx, c] = v / np.linalg.norm(v)
        return q
    q, _ = np.linalg.qr(rng.standard_normal((d, K)))
    return q


def collapsed_state(cfg, s=0.8, rng=None, output_scale=None, nonnegative=False):
    """Exactly collapsed state whose weights satisfy the stationary Gram relations.

    ``H1 = s Q_1 (I_K ⊗ 1_n^T)``, ``W_l = t_l Q_{l+1} Q_l^T`` and
    ``W_L = t_L Q_L^T`` with ``λ_l t_l^2 = λ_H1 n s^2``. When ``output_scale``
    is given, ``s`` is chosen so that the collapsed output is
    ``output_scale * e_c``.
    """
    rng = np.random.default_rng(1234) if rng is None else rng
    K, n, d, L = cfg.K, cfg.n, cfg.d, cfg.L
    frames = [orthonormal_frame(rng, d, K, nonnegative) for _ in range(L)]
    lam_w = np.asarray(cfg.lambda_W)

    def scales(s):
        return np.sqrt(cfg.lambda_H1 * n * s**2 / lam_w)

    if output_scale is not None:
        # z scale = s * prod(t_l) and every t_l is proportional to s
        unit = np.prod(scales(1.0))
        s = (output_scale / unit) ** (1.0 / (L + 1))
    t = scales(s)
    h1 = s * frames[0] @ build_labels(K, n)
    ws = [t[l] * frames[l + 1] @ frames[l].T for l in range(L - 1)]
    ws.append(t[L - 1] * frames[L - 1].T)
    return ModelState(h1, tuple(ws))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def record_criterion(key, passed, detail):
    line = f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("abcdefghij")), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
