"""Train, analyse, verify and summarise runs on disk."""

import csv
import glob
import json
import logging
import os

import numpy as np

from .. import analysis as an
from .. import theory as th
from ..model import forward, init_state
from ..numerics import make_rng
from ..training import dnc1_metric, is_collapsed, train
from .checkpoint import load_checkpoint, save_checkpoint
from .config import FORMAT_VERSION

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, config_hash):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION} config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    """Return ``(comment, header, rows)`` with rows as lists of strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        comment = fh.readline().rstrip("\n")
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return comment, header, rows


def _spectrum_rows(summary):
    return [(i, v, i < summary.outlier_count) for i, v in enumerate(summary.eigenvalues)]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def checkpoint_dir(out_dir, epoch):
    return os.path.join(out_dir, "checkpoints", f"epoch_{epoch:08d}")


def run_train(config):
    """Train from the seeded initialisation; write the log, snapshots and a ``final`` checkpoint."""
    cfg = config.hyper
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    rng = make_rng(cfg.seed)
    state0 = init_state(cfg, rng)
    rng_state = rng.bit_generator.state

    def snap(epoch, state):
        save_checkpoint(checkpoint_dir(out, epoch), state, epoch, config, rng_state)

    state, tlog = train(
        cfg,
        state=state0,
        probe_layers=config.probe_layers,
        snapshot_epochs=config.snapshot_epochs,
        on_snapshot=snap,
    )
    layers = tlog.probe_layers
    header = ["epoch", "loss", "grad_norm"] + [f"m_layer{l}" for l in layers]
    rows = [[r.epoch, r.loss, r.grad_norm] + [r.dnc1[l].value for l in layers] for r in tlog.records]
    write_csv(os.path.join(out, "train_log.csv"), header, rows, config.hash)
    final = save_checkpoint(os.path.join(out, "checkpoints", "final"), state, tlog.final_epoch, config, rng_state)
    return state, tlog, final


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _check_compatible(ckpt_cfg, config):
    a, b = ckpt_cfg.hyper, config.hyper
    for key in ("K", "n", "d", "L", "activation"):
        if getattr(a, key) != getattr(b, key):
            raise ValueError(f"checkpoint has {key}={getattr(a, key)} but config has {key}={getattr(b, key)}")


def run_analyze(ckpt_path, config=None, out_dir=None):
    """Write one CSV per requested analysis and probe layer; returns the written paths."""
    ckpt = load_checkpoint(ckpt_path)
    if config is None:
        config = ckpt.config
    else:
        _check_compatible(ckpt.config, config)
    out = out_dir or config.output_dir
    os.makedirs(out, exist_ok=True)
    cfg = config.hyper
    tau, floor = config.outlier_tau_rel, config.outlier_abs_floor
    h = config.hash
    want = set(config.analyses)
    cache = forward(ckpt.state, cfg)
    written = []

    def emit(name, header, rows):
        written.append(write_csv(os.path.join(out, name), header, rows, h))

    if "dnc_metrics" in want:
        rows = []
        for l in range(1, cfg.L + 1):
            m = dnc1_metric(cache, l)
            rows.append((l, m.value, m.degenerate))
        emit("dnc_metrics.csv", ["layer", "m", "degenerate"], rows)
    if "weight_gram" in want:
        res = an.gram_relation_residuals(ckpt.state, cfg)
        emit("gram_relation.csv", ["layer", "relative_residual"], sorted(res.items()))

    for l in config.probe_layers:
        log.info("analysing layer %d", l)
        eigen_basis = cfg.relu and "grad_align" in want
        hess = None
        if want & {"hessian", "knockout", "align"} or eigen_basis:
            hess = an.hessian_layer(cache, l)
        hess_summary = None
        keep = hess.shape[0] if eigen_basis else 0
        if "knockout" in want:
            rep = an.knockout_spectra(cache, l, tau, floor, keep_vectors=keep, hess=hess)
            hess_summary = rep.spectra["none"]
            rows = [(k, i, v, flag) for k in an.KNOCKOUTS for i, v, flag in _spectrum_rows(rep.spectra[k])]
            emit(f"knockout_l{l}.csv", ["removed", "index", "eigenvalue", "outlier"], rows)
        elif "hessian" in want or eigen_basis:
            hess_summary = an.spectrum(hess, keep, tau, floor)
        if "hessian" in want:
            emit(f"hessian_l{l}.csv", ["index", "eigenvalue", "outlier"], _spectrum_rows(hess_summary))
        if "align" in want:
            f = an.hessian_alignment(cache, l, hess)
            rows = [(c + 1, cp + 1, f.values[c, cp], f.defined[c, cp]) for c in range(cfg.K) for cp in range(cfg.K)]
            emit(f"align_l{l}.csv", ["c", "c_prime", "f", "defined"], rows)
        del hess
        if "grad_align" in want:
            g = an.gradient_alignment(cache, l)
            rows = [(c + 1, cp + 1, g.values[c, cp]) for c in range(cfg.K) for cp in range(cfg.K)]
            emit(f"grad_align_l{l}.csv", ["c", "c_prime", "coefficient"], rows)
            if eigen_basis:
                ge = an.gradient_alignment(cache, l, basis="eigen", eigvecs=hess_summary.vectors)
                rows = [(i, hess_summary.eigenvalues[i], ge.values[i]) for i in range(len(ge.values))]
                emit(f"grad_align_eigen_l{l}.csv", ["index", "eigenvalue", "coefficient"], rows)
        hess_summary = None
        spectral = (
            ("weight_gram", lambda: an.weight_gram_spectrum(ckpt.state, l, tau, floor)),
            ("grad_cov", lambda: an.spectrum(an.gradient_covariance(cache, l), 0, tau, floor)),
            ("backprop", lambda: an.spectrum(an.backprop_error_moment(cache, l), 0, tau, floor)),
            ("feature_gram", lambda: an.spectrum(an.feature_gram(cache, l), 0, tau, floor)),
        )
        for name, build in spectral:
            if name in want:
                emit(f"{name}_l{l}.csv", ["index", "eigenvalue", "outlier"], _spectrum_rows(build()))
        if "frames" in want:
            fr = an.frame_diagnostics(cache, l)
            rows = [("r", c + 1, cp + 1, fr.r[c, cp]) for c in range(cfg.K) for cp in range(cfg.K)]
            if fr.r_tilde is not None:
                rows += [("r_tilde", c + 1, cp + 1, fr.r_tilde[c, cp]) for c in range(cfg.K) for cp in range(cfg.K)]
            emit(f"frames_l{l}.csv", ["kind", "c", "c_prime", "value"], rows)
    return written


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

RANK_TOL = 1e-10

# checks that only hold exactly for the linear model; informational in ReLU mode
LINEAR_ONLY = {
    "hessian_outliers_equal",
    "hessian_theory_values",
    "hessian_natural_alignment",
    "hessian_subspace",
    "within_knockout_unchanged",
    "orthogonal_images",
    "gradient_natural_basis",
    "gradient_theory_direction",
    "weight_gram_theory",
    "gram_relation",
    "grad_cov_outliers",
    "backprop_moment",
    "feature_gram",
    "frame_orthogonality",
}


class Verifier:
    def __init__(self, config, tol_scale=1.0):
        self.config = config
        self.scale = float(tol_scale)
        self.checks = []

    def tol(self, name):
        return self.config.tol(name, self.scale)

    def add(self, name, layer, passed, measured, tolerance, **detail):
        relu = self.config.hyper.relu
        status = "pass" if passed else "fail"
        if relu and name in LINEAR_ONLY:
            status = "info"
        self.checks.append(
            {
                "name": name,
                "layer": layer,
                "status": status,
                "passed": bool(passed),
                "measured": _jsonable(measured),
                "tolerance": _jsonable(tolerance),
                "detail": {k: _jsonable(v) for k, v in detail.items()},
            }
        )

    @property
    def failed(self):
        return [c for c in self.checks if c["status"] == "fail"]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def verify_layer(ver, cache, state, l):
    config = ver.config
    cfg = config.hyper
    K = cfg.K
    tau, floor = config.outlier_tau_rel, config.outlier_abs_floor
    pred = th.estimate_constants(cache, state, cfg, l, require_collapse=True)

    m = dnc1_metric(cache, l).value
    ver.add("collapse_metric", l, m <= ver.tol("dnc1"), m, ver.tol("dnc1"))

    hess = an.hessian_layer(cache, l)
    keep = hess.shape[0] if cfg.relu else K * K
    rep = an.knockout_spectra(cache, l, tau, floor, keep_vectors=keep, hess=hess)
    hs = rep.spectra["none"]
    ver.add("hessian_outlier_count", l, hs.outlier_count == K * K, hs.outlier_count, K * K)
    spread = hs.outlier_spread()
    ver.add("hessian_outliers_equal", l, spread <= ver.tol("hessian_equal"), spread, ver.tol("hessian_equal"))
    cmp = th.compare(pred, hs, "hessian", ver.tol("hessian_theory"))
    ver.add("hessian_theory_values", l, cmp.passed, cmp.max_error, cmp.tolerance, predicted=pred.hessian_value)
    f = an.hessian_alignment(cache, l, hess)
    gap = float(1.0 - np.nanmin(f.values)) if f.defined.all() else float("inf")
    ver.add("hessian_natural_alignment", l, gap <= ver.tol("alignment"), gap, ver.tol("alignment"))
    proj, _ = th.subspace_projections(th.predicted_eigvecs(pred, "hessian").vectors, hs.vectors[:, : K * K])
    gap = float(1.0 - proj.min())
    ver.add("hessian_subspace", l, gap <= ver.tol("subspace"), gap, ver.tol("subspace"))

    counts = rep.outlier_counts()
    expected = {"none": K * K, "class": K * (K - 1), "cross": K, "within": K * K}
    ver.add("knockout_counts", l, counts == expected, counts, expected)
    rel = rep.relative_residual
    ver.add("decomposition_residual", l, rel <= ver.tol("decomposition"), rel, ver.tol("decomposition"))
    shift = float(np.max(np.abs(rep.spectra["within"].eigenvalues - hs.eigenvalues)) / hs.eigenvalues[0])
    ver.add("within_knockout_unchanged", l, shift <= ver.tol("within_unchanged"), shift, ver.tol("within_unchanged"))
    del hess, rep
    overlap = an.component_overlap(cache, l)
    ver.add("orthogonal_images", l, overlap <= ver.tol("orthogonal_images"), overlap, ver.tol("orthogonal_images"))

    g = an.gradient_alignment(cache, l)
    diag_err = float(np.max(np.abs(np.diag(g.values) - 1.0 / K)))
    off = float(np.max(np.abs(g.values - np.diag(np.diag(g.values)))))
    ok = diag_err <= ver.tol("grad_diag") and off <= ver.tol("grad_offdiag")
    ver.add("gradient_natural_basis", l, ok, [diag_err, off], [ver.tol("grad_diag"), ver.tol("grad_offdiag")])
    cmp = th.compare(pred, an.gradient_update_term(cache, l), "gradient", ver.tol("grad_cosine"))
    ver.add("gradient_theory_direction", l, cmp.passed, cmp.max_error, cmp.tolerance, **cmp.detail)
    if cfg.relu:
        ge = an.gradient_alignment(cache, l, basis="eigen", eigvecs=hs.vectors)
        coef = np.sort(ge.values)[::-1]
        major = int(np.sum(coef > ver.tol("grad_eigen_major")))
        rest = float(coef[K]) if coef.size > K else 0.0
        ok = major == K and rest < ver.tol("grad_eigen_minor")
        ver.add(
            "gradient_eigen_support",
            l,
            ok,
            [major, rest],
            [K, ver.tol("grad_eigen_major"), ver.tol("grad_eigen_minor")],
            leading=coef[: 2 * K],
        )
    del hs

    ws = an.weight_gram_spectrum(state, l, tau, floor)
    wtol = ver.tol("weight_gram_relu" if cfg.relu else "weight_gram")
    spread = ws.outlier_spread()
    # ReLU mode compares the top K values whatever the outlier rule says
    top = ws.eigenvalues[:K]
    spread_top = float((top[0] - top[-1]) / top[0])
    if cfg.relu:
        ok = spread_top <= wtol
        measured = [int(ws.outlier_count), spread_top]
    else:
        ok = ws.outlier_count == K and spread <= wtol
        measured = [int(ws.outlier_count), spread]
    ver.add("weight_gram_outliers", l, ok, measured, [K, wtol])
    cmp = th.compare(pred, ws, "weight_gram", ver.tol("weight_gram"))
    ver.add("weight_gram_theory", l, cmp.passed, cmp.max_error, cmp.tolerance, predicted=pred.spectra["weight_gram"][0])

    cs = an.spectrum(an.gradient_covariance(cache, l), 0, tau, floor)
    cmp = th.compare(pred, cs, "grad_cov", ver.tol("grad_cov"))
    ver.add("grad_cov_outliers", l, cmp.passed, [cs.outlier_count, cmp.max_error], [K - 1, cmp.tolerance])

    # the lone eigenvalue shrinks with the output fit, so rank is a numerical-rank count
    bs = an.spectrum(an.backprop_error_moment(cache, l), 0, RANK_TOL, floor)
    cmp = th.compare(pred, bs, "backprop", ver.tol("backprop"))
    top = bs.eigenvalues[: K - 1]
    eq = float((top[0] - top[-1]) / top[0]) if top[0] > 0 else 0.0
    smaller = bool(bs.eigenvalues[K - 1] < top[-1] * (1 - ver.tol("backprop")))
    ok = cmp.passed and eq <= ver.tol("backprop") and smaller
    ver.add("backprop_moment", l, ok, [bs.outlier_count, eq, cmp.max_error], [K, ver.tol("backprop")], smaller=smaller)

    fs = an.spectrum(an.feature_gram(cache, l), 0, tau, floor)
    cmp = th.compare(pred, fs, "feature_gram", ver.tol("feature_gram"))
    ver.add("feature_gram", l, cmp.passed, [fs.outlier_count, cmp.max_error], [K, cmp.tolerance])

    fr = an.frame_diagnostics(cache, l)
    diag = np.diag(fr.r)
    off = float(np.max(fr.r - np.diag(diag)) / diag.min()) if diag.min() > 0 else float("inf")
    dspread = float((diag.max() - diag.min()) / diag.max())
    ok = off <= ver.tol("frame_offdiag") and dspread <= ver.tol("frame_diag")
    ver.add("frame_orthogonality", l, ok, [off, dspread], [ver.tol("frame_offdiag"), ver.tol("frame_diag")])


def run_verify(ckpt_path, config=None, tol_scale=1.0, out_dir=None):
    """Run every check at the probe layers; returns the report dict.

    Raises :class:`~deepufm.theory.NotCollapsedError` when the state is not collapsed.
    """
    ckpt = load_checkpoint(ckpt_path)
    if config is None:
        config = ckpt.config
    else:
        _check_compatible(ckpt.config, config)
    cfg = config.hyper
    cache = forward(ckpt.state, cfg)
    probes = {l: dnc1_metric(cache, l) for l in config.probe_layers}
    if not is_collapsed(probes):
        bad = {l: m.value for l, m in probes.items()}
        raise th.NotCollapsedError(f"collapse metric above threshold or degenerate at probe layers: {bad}")
    ver = Verifier(config, tol_scale)
    for l in config.probe_layers:
        verify_layer(ver, cache, ckpt.state, l)
    res = an.gram_relation_residuals(ckpt.state, cfg)
    worst = max(res.values())
    ver.add("gram_relation", 0, worst <= ver.tol("gram_relation"), worst, ver.tol("gram_relation"), per_layer=res)
    report = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.hash,
        "activation": cfg.activation,
        "epoch": ckpt.epoch,
        "tol_scale": ver.scale,
        "passed": not ver.failed,
        "checks": ver.checks,
    }
    out = out_dir or config.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "verify_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _summarise_csv(path):
    _, header, rows = read_csv(path)
    name = os.path.basename(path)
    if "eigenvalue" in header and "outlier" in header:
        iv, io = header.index("eigenvalue"), header.index("outlier")
        group = header.index("removed") if "removed" in header else None
        groups = {}
        for r in rows:
            groups.setdefault(r[group] if group is not None else "", []).append(r)
        out = []
        for key, rs in groups.items():
            vals = np.array([float(r[iv]) for r in rs])
            flags = np.array([r[io] == "1" for r in rs])
            k = int(flags.sum())
            bulk = float(vals[k]) if k < len(vals) else float("nan")
            label = f"{name}[{key}]" if key else name
            out.append((label, len(vals), k, float(vals[0]), float(vals[k - 1]) if k else float("nan"), bulk))
        return out
    for col in ("f", "coefficient", "value", "m", "relative_residual"):
        if col in header:
            vals = np.array([float(r[header.index(col)]) for r in rows])
            return [(name, len(vals), "", float(np.nanmax(vals)), float(np.nanmin(vals)), "")]
    return [(name, len(rows), "", "", "", "")]


def run_report(directory):
    """Summarise every CSV in ``directory`` into ``summary.csv``; returns the rows."""
    paths = sorted(p for p in glob.glob(os.path.join(directory, "*.csv")) if os.path.basename(p) != "summary.csv")
    if not paths:
        raise FileNotFoundError(f"no CSV files in {directory}")
    rows = []
    hashes = set()
    for p in paths:
        comment, _, _ = read_csv(p)
        hashes.add(comment.partition("config_hash=")[2])
        rows.extend(_summarise_csv(p))
    verify = os.path.join(directory, "verify_report.json")
    if os.path.isfile(verify):
        with open(verify, encoding="utf-8") as fh:
            rep = json.load(fh)
        for status in ("pass", "fail", "info"):
            n = sum(1 for c in rep["checks"] if c["status"] == status)
            rows.append((f"verify_report.json[{status}]", n, "", "", "", ""))
    tag = ",".join(sorted(hashes))
    write_csv(
        os.path.join(directory, "summary.csv"),
        ["source", "rows", "outliers", "max_or_top", "min_or_last_outlier", "bulk_edge"],
        rows,
        tag,
    )
    return rows
