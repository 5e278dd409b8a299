"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
``lambda_W`` takes either one value (used for every layer) or ``L``
comma-separated values. ``init_std = auto`` means ``1/sqrt(d)``.
Verification tolerances are overridden with ``tol.<name> = value``.
"""

import hashlib
from dataclasses import dataclass, field, replace

from ..model import HyperConfig

FORMAT_VERSION = 1

ANALYSES = (
    "hessian",
    "knockout",
    "align",
    "grad_align",
    "weight_gram",
    "grad_cov",
    "backprop",
    "feature_gram",
    "frames",
    "dnc_metrics",
)

DEFAULT_TOLERANCES = {
    "dnc1": 1e-6,
    "decomposition": 1e-10,
    "hessian_equal": 1e-2,
    "hessian_theory": 1e-2,
    "alignment": 1e-3,
    "subspace": 1e-3,
    "within_unchanged": 1e-8,
    "orthogonal_images": 1e-8,
    "grad_diag": 1e-2,
    "grad_offdiag": 1e-4,
    "grad_cosine": 1e-3,
    "grad_eigen_major": 1e-3,
    "grad_eigen_minor": 1e-4,
    "weight_gram": 1e-2,
    "weight_gram_relu": 5e-2,
    "gram_relation": 1e-6,
    "grad_cov": 1e-2,
    "backprop": 1e-2,
    "feature_gram": 1e-3,
    "frame_offdiag": 1e-4,
    "frame_diag": 1e-3,
}

_HYPER_KEYS = (
    "K",
    "n",
    "d",
    "L",
    "lambda_H1",
    "lambda_W",
    "activation",
    "lr",
    "max_epochs",
    "grad_tol",
    "eval_every",
    "init_std",
    "seed",
)
_EXTRA_KEYS = (
    "probe_layers",
    "analyses",
    "snapshot_epochs",
    "output_dir",
    "outlier_tau_rel",
    "outlier_abs_floor",
)
_INT_KEYS = {"K", "n", "d", "L", "max_epochs", "eval_every", "seed"}
_FLOAT_KEYS = {"lambda_H1", "lr", "grad_tol", "outlier_tau_rel", "outlier_abs_floor"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    hyper: HyperConfig
    probe_layers: tuple = (3,)
    analyses: tuple = ANALYSES
    snapshot_epochs: tuple = ()
    output_dir: str = "runs/default"
    outlier_tau_rel: float = 1e-3
    outlier_abs_floor: float = 1e-12
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def __post_init__(self):
        L = self.hyper.L
        bad = [l for l in self.probe_layers if not 1 <= l <= L]
        if bad:
            raise ConfigError(f"probe_layers {bad} outside 1..{L}")
        unknown = [a for a in self.analyses if a not in ANALYSES]
        if unknown:
            raise ConfigError(f"unknown analyses {unknown}; choose from {', '.join(ANALYSES)}")
        if list(self.snapshot_epochs) != sorted(self.snapshot_epochs):
            raise ConfigError("snapshot_epochs must be sorted")

    def tol(self, name, scale=1.0):
        return self.tolerances[name] * scale

    def with_seed(self, seed):
        return replace(self, hyper=replace(self.hyper, seed=int(seed)))

    def with_output_dir(self, path):
        return replace(self, output_dir=str(path))

    def canonical_items(self):
        h = self.hyper
        items = {
            "K": h.K,
            "n": h.n,
            "d": h.d,
            "L": h.L,
            "lambda_H1": h.lambda_H1,
            "lambda_W": ",".join(repr(v) for v in h.lambda_W),
            "activation": h.activation,
            "lr": h.lr,
            "max_epochs": h.max_epochs,
            "grad_tol": h.grad_tol,
            "eval_every": h.eval_every,
            "init_std": h.init_std,
            "seed": h.seed,
            "probe_layers": ",".join(str(l) for l in self.probe_layers),
            "analyses": ",".join(self.analyses),
            "snapshot_epochs": ",".join(str(e) for e in self.snapshot_epochs),
            "outlier_tau_rel": self.outlier_tau_rel,
            "outlier_abs_floor": self.outlier_abs_floor,
        }
        for k in sorted(self.tolerances):
            items[f"tol.{k}"] = self.tolerances[k]
        return items

    def to_text(self, include_output_dir=True):
        items = self.canonical_items()
        if include_output_dir:
            items["output_dir"] = self.output_dir
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())

    @property
    def hash(self):
        """Digest of everything that affects results (the output directory excluded)."""
        return hashlib.sha256(self.to_text(include_output_dir=False).encode()).hexdigest()[:16]


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _int_list(key, text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def parse_config(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _HYPER_KEYS and key not in _EXTRA_KEYS and not key.startswith("tol."):
            raise ConfigError(f"unknown config key {key!r}")
        if key.startswith("tol.") and key[4:] not in DEFAULT_TOLERANCES:
            raise ConfigError(f"unknown tolerance key {key!r}")
        raw[key] = value

    missing = [k for k in ("K", "n", "d", "L", "lambda_H1", "lambda_W") if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    hyper = {}
    for key in _HYPER_KEYS:
        if key not in raw:
            continue
        value = raw[key]
        try:
            if key in _INT_KEYS:
                hyper[key] = int(value)
            elif key in _FLOAT_KEYS:
                hyper[key] = float(value)
            elif key == "lambda_W":
                parts = [float(t) for t in value.split(",") if t.strip()]
                hyper[key] = parts[0] if len(parts) == 1 else tuple(parts)
            elif key == "init_std":
                hyper[key] = None if value.lower() == "auto" else float(value)
            else:
                hyper[key] = value
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    try:
        hc = HyperConfig(**hyper)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    extra = {}
    if "probe_layers" in raw:
        extra["probe_layers"] = _int_list("probe_layers", raw["probe_layers"])
    if "snapshot_epochs" in raw:
        extra["snapshot_epochs"] = _int_list("snapshot_epochs", raw["snapshot_epochs"])
    if "analyses" in raw:
        names = tuple(t.strip() for t in raw["analyses"].split(",") if t.strip())
        extra["analyses"] = ANALYSES if names == ("all",) else names
    if "output_dir" in raw:
        extra["output_dir"] = raw["output_dir"]
    for key in ("outlier_tau_rel", "outlier_abs_floor"):
        if key in raw:
            try:
                extra[key] = float(raw[key])
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw[key]!r}") from None
    tolerances = dict(DEFAULT_TOLERANCES)
    for key, value in raw.items():
        if key.startswith("tol."):
            try:
                tolerances[key[4:]] = float(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return ExperimentConfig(hyper=hc, tolerances=tolerances, **extra)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
