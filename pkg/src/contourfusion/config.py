"""Flat ``section.key = value`` configuration with documented defaults.

Blank lines and ``#`` comments are ignored. Every key must appear in
:data:`DEFAULTS`; unknown keys are rejected. Values are parsed to the type of
the default (``auto`` is accepted where the default is ``None``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    doc: str


DEFAULTS: dict[str, Key] = {
    # smoothing of Heaviside and max
    "smooth.delta": Key(1.0, float, "Heaviside scale for signed-distance (linear) decoders, pixels"),
    "smooth.delta_deep": Key(0.1, float, "Heaviside scale for the deep decoder's tanh output"),
    "smooth.gamma": Key(10.0, float, "smooth-max sharpness"),
    "smooth.variant": Key("log-sum-exp", str, "smooth-max variant"),
    # energy weights and priors
    "energy-weights.shape": Key(1.0, float, "weight of the KDE shape prior"),
    "energy-weights.location": Key(0.1, float, "weight of the location prior"),
    "energy-weights.orientation": Key(0.0, float, "weight of the orientation prior"),
    "energy-weights.overlap": Key(5.0, float, "weight of the pairwise overlap penalty"),
    "location.sigma": Key(4.0, float, "location prior spread, pixels"),
    "orientation.kind": Key("uniform", str, "uniform or von-mises"),
    "orientation.mu": Key(0.0, float, "von Mises mean angle, radians"),
    "orientation.concentration": Key(0.0, float, "von Mises concentration"),
    # optimiser
    "optimizer.max_iterations": Key(500, int, "L-BFGS iteration budget"),
    "optimizer.grad_tolerance": Key(1e-5, float, "stop when max |grad| falls below this"),
    "optimizer.memory": Key(10, int, "L-BFGS history length"),
    "optimizer.empty_shape_area": Key(10, int, "shapes with fewer pixels are pruned"),
    "optimizer.optimize_rotation": Key(False, bool, "let the angle evolve"),
    # shape model and decoder
    "shape-model.components": Key(32, int, "number of kernel PCA components c"),
    "shape-model.kernel": Key("linear-on-signed-distance", str, "kernel kind"),
    "shape-model.rbf_scale": Key(1.0, float, "RBF kernel scale"),
    "shape-model.clamp": Key(None, float, "signed-distance clamp in pixels; auto = window size"),
    "kde.sigma": Key(None, float, "KDE bandwidth; auto = mean nearest-neighbour distance"),
    "decoder-spec.d_f": Key(3, int, "filter size"),
    "decoder-spec.n_conv0": Key(256, int, "filters after the dense layer"),
    "decoder-spec.d0": Key(None, int, "initial extent; auto = window / 2**u with the largest extent <= 8"),
    "train.learning_rate": Key(1e-4, float, "Adam step size"),
    "train.epochs": Key(1000, int, "training epochs"),
    "train.batch_size": Key(64, int, "minibatch size"),
    # initialisation
    "init.use_rotation_init": Key(False, bool, "search the initial angle on a grid"),
    "init.delta_kappa_deg": Key(15.0, float, "angle grid step, degrees"),
    "init.min_init_pixels": Key(10, int, "smaller init masks fall back to the mean shape"),
    "init.rot_prior_weight": Key(1.0, float, "weight of the angle prior in the rotation search"),
    "init.rot_fit_weight": Key(1.0, float, "weight of the reconstruction term in the rotation search"),
    # synthetic corpus
    "synth.n_train_shapes": Key(100, int, "training masks written next to the scenes"),
    "synth.n_shapes": Key(3, int, "instances per scene"),
    "synth.base_radius": Key(14.0, float, "blob radius, pixels"),
    "synth.n_harmonics": Key(4, int, "boundary harmonics"),
    "synth.harmonic_amp": Key(0.3, float, "total harmonic amplitude"),
    "synth.overlap": Key(0.1, float, "overlap target between neighbouring blobs"),
    "synth.noise": Key(0.1, float, "Gaussian noise on the foreground probability"),
    "synth.jitter": Key(2.0, float, "detection centre jitter, pixels"),
    "synth.image": Key(128, int, "image side, pixels"),
    "synth.window": Key(64, int, "shape window side, pixels"),
    "synth.p_low": Key(0.02, float, "lower probability clamp"),
    "synth.p_high": Key(0.98, float, "upper probability clamp"),
    # evaluation and execution
    "eval.eps_d": Key(3.0, float, "contour band half-width for weighted IoU"),
    "eval.iou_min": Key(0.7, float, "IoU needed for a match"),
    "run.workers": Key(1, int, "parallel scene workers (results are gathered in scene order)"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(key: str, text: str):
    spec = DEFAULTS[key]
    t = text.strip()
    if spec.default is None and t.lower() == "auto":
        return None
    try:
        if spec.kind is bool:
            if t.lower() in _TRUE:
                return True
            if t.lower() in _FALSE:
                return False
            raise ValueError
        if spec.kind is int:
            return int(t)
        if spec.kind is float:
            v = float(t)
            if not math.isfinite(v):
                raise ValueError
            return v
        return t
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {spec.kind.__name__})") from None


class Config(dict):
    """Resolved configuration: every documented key, defaults filled in."""

    @classmethod
    def defaults(cls) -> "Config":
        return cls({k: v.default for k, v in DEFAULTS.items()})

    def update_from(self, items: dict[str, str]) -> "Config":
        for k, text in items.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self[k] = _parse(k, text)
        return self

    def snapshot(self) -> dict:
        return {k: self[k] for k in sorted(self)}


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"{origin}:{n}: unknown config key {k!r}")
        if k in items:
            raise ConfigError(f"{origin}:{n}: duplicate key {k!r}")
        items[k] = v
    return items


def load_config(path: str | Path | None) -> Config:
    cfg = Config.defaults()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return cfg.update_from(parse_text(text, str(path)))


def describe() -> str:
    """Every key with its default and meaning, in config-file syntax."""
    lines = []
    for k, spec in DEFAULTS.items():
        d = "auto" if spec.default is None else spec.default
        if isinstance(d, bool):
            d = str(d).lower()
        lines.append(f"# {spec.doc}\n{k} = {d}")
    return "\n".join(lines) + "\n"
