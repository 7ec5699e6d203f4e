"""Flat ``section.key = value`` configuration with typed, documented defaults.

Precedence, lowest first: built-in defaults, the ``--config`` file, the
dedicated ``--seed`` / ``--deterministic`` flags, then ``--set`` overrides in
the order given. Unknown keys and malformed values raise :class:`ConfigError`
before any computation starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    type: str  # int | float | bool | str | path
    default: Any
    doc: str


_KEYS = [
    # scene synthesis
    Key("scene.kind", "str", "default", "analytic scene: 'default' (sphere + box) or 'sphere' (unit sphere)"),
    Key("scene.resolution", "int", 64, "input image side in pixels"),
    Key("scene.camera", "str", "default", "input camera: 'default' (oblique, distance 3) or 'canonical' (on -z axis)"),
    Key("scene.dir", "path", "", "load the input view from this directory instead of synthesising it"),
    # encoder
    Key("encoder.shallow_channels", "int", 32, "channels of the shallow residual stream"),
    Key("encoder.roi_channels", "int", 64, "channels of the region-of-interest features (even)"),
    Key("encoder.heads", "int", 4, "attention heads"),
    Key("encoder.n1", "int", 8, "layers in the first selective-attention iteration"),
    Key("encoder.n2", "int", 4, "layers in the second selective-attention iteration"),
    Key("encoder.fusion_width", "int", 128, "width of the per-point fusion MLP"),
    Key("encoder.pe_freqs", "int", 6, "positional-encoding frequencies for point coordinates"),
    Key("encoder.state_dim", "int", 16, "selective-scan state size"),
    # field
    Key("field.hidden", "int", 64, "geometry MLP width"),
    Key("field.n_hidden", "int", 2, "geometry MLP hidden layers after the input layer"),
    Key("field.geo_feat", "int", 64, "geometry feature width passed to the colour MLP"),
    Key("field.color_hidden", "int", 64, "colour MLP width"),
    Key("field.pe_freqs", "int", 6, "positional-encoding frequencies inside the field"),
    Key("field.beta_init", "float", 0.02, "initial density scale beta"),
    Key("field.density_sign", "int", -1, "-1: density high inside (physical); +1: literal orientation"),
    Key("field.view_dependent", "bool", True, "condition colour on the viewing direction"),
    Key("field.init_radius", "float", 0.6, "radius of the sphere the geometry MLP starts as"),
    Key("field.n_samples", "int", 128, "samples per ray for render"),
    Key("field.near", "float", 0.1, "ray near bound"),
    Key("field.far", "float", 6.0, "ray far bound"),
    Key("field.analytic", "bool", False, "render/extract the scene's analytic SDF instead of a checkpoint"),
    Key("field.analytic_beta", "float", 0.01, "beta used with field.analytic"),
    # training
    Key("train.epochs", "int", 40, "total epochs of the schedule"),
    Key("train.max_epochs", "int", 0, "stop after this many epochs (0 = run the whole schedule)"),
    Key("train.steps_per_epoch", "int", 64, "optimizer steps per epoch"),
    Key("train.batch_rays", "int", 512, "rays per step"),
    Key("train.n_samples", "int", 64, "samples per ray during training"),
    Key("train.lr", "float", 6e-5, "initial learning rate"),
    Key("train.lr_step_frac", "float", 0.55, "fraction of epochs after which the learning rate drops"),
    Key("train.lr_gamma", "float", 1e-5 / 6e-5, "learning-rate factor applied at the step"),
    Key("train.stage2_start", "float", 0.25, "fraction of epochs spent in stage 1 (SDF loss only)"),
    Key("train.w_3d", "float", 1.0, "weight of the SDF loss"),
    Key("train.w_rgb", "float", 0.1, "weight of the photometric loss in stage 2"),
    Key("train.w_depth", "float", 0.1, "weight of the depth loss in stage 2"),
    Key("train.w_normal", "float", 0.01, "weight of the normal loss in stage 2"),
    Key("train.m_uniform", "int", 8, "uniform SDF supervision points per ray"),
    Key("train.m_near", "int", 8, "near-surface SDF supervision points per ray"),
    Key("train.sigma_near", "float", 0.02, "std of the near-surface jitter"),
    Key("train.val_rays", "int", 256, "rays in the fixed validation batch"),
    Key("train.resume", "path", "", "checkpoint to resume from"),
    # extraction / evaluation
    Key("extract.resolution", "int", 64, "marching-cubes cells per axis"),
    Key("extract.bbox", "float", 1.5, "half-width of the cube [-b, b]^3 that is meshed"),
    Key("eval.fscore_tau", "float", 0.02, "F-score threshold, as a fraction of the unit diagonal"),
    Key("eval.n_points", "int", 100000, "surface samples per mesh (10k leaves a sampling floor near CD x1000 = 10)"),
    Key("eval.normalize", "bool", True, "scale both meshes so the reference bbox diagonal is 1"),
    Key("eval.reference_resolution", "int", 128, "marching-cubes resolution of the analytic reference mesh"),
    Key("eval.iou_resolution", "int", 64, "voxel resolution for mesh IoU"),
    # run
    Key("run.seed", "int", 0, "seed for every random draw"),
    Key("run.deterministic", "bool", False, "single-threaded BLAS and jitter-free rendering"),
    Key("gradcheck.tolerance", "float", 1e-4, "maximum relative error"),
    Key("gradcheck.inject_fault", "str", "", "test hook: negate this case's analytic gradient"),
]

KEYS: dict[str, Key] = {k.name: k for k in _KEYS}


def _parse_value(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.type == "int":
            return int(raw)
        if key.type == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if key.type == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.type}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Config:
    def __init__(self, values: dict | None = None):
        self._values = {k.name: k.default for k in _KEYS}
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, name: str):
        if name not in self._values:
            raise ConfigError(f"unknown config key {name!r}")
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        key = KEYS[name]
        if isinstance(value, str):
            value = _parse_value(key, value)
        elif key.type == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        expected = {"int": int, "float": float, "bool": bool, "str": str, "path": str}[key.type]
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"{name}: expected {key.type}, got {type(value).__name__}")
        self._values[name] = value

    def items(self):
        return sorted(self._values.items())

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def apply_lines(self, lines: Iterable[str], source: str = "<config>") -> None:
        for lineno, line in enumerate(lines, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
            name, raw = text.split("=", 1)
            try:
                self[name.strip()] = raw.strip()
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            name, raw = item.split("=", 1)
            self[name.strip()] = raw.strip()

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.items())

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self._values == other._values


def load(path=None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        # an unreadable file is an I/O failure, not a config error: let OSError through
        cfg.apply_lines(Path(path).read_text().splitlines(), str(path))
    cfg.apply_overrides(overrides)
    return cfg


def describe() -> str:
    """One line per key: name, type, default, doc."""
    return "".join(f"{k.name} ({k.type}, default {_format_value(k.default)}): {k.doc}\n" for k in _KEYS)
