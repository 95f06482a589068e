"""
Pipeline configuration: one JSON document, seven sections, strict keys.

Every field has a default, so ``{}`` is a valid configuration. Unknown
sections or keys are rejected before anything runs.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .io import FormatError, psf_from_dict, read_psf
from .localizer import LocalizerConfig
from .losses import SIGMA_FLOOR
from .metrics import ALPHA_AXIAL, ALPHA_LATERAL, FRC_THRESHOLD, MATCH_RADIUS
from .noise import camera_from_dict
from .postprocess import NMS_FINAL_THRESHOLD, NMS_PEAK_THRESHOLD
from .psf import PsfAsParams, PsfModel
from .render import RenderSpec
from .simulator import PriorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PostprocessConfig:
    nms_peak_threshold: float = NMS_PEAK_THRESHOLD
    nms_final_threshold: float = NMS_FINAL_THRESHOLD
    sigma_floor: float = SIGMA_FLOOR
    cdf_bins: int = 20
    sigma_drop_fraction: float = 0.0
    group_radius: float | None = None  # nm; None disables grouping


@dataclass(frozen=True)
class MetricsConfig:
    match_radius: float = MATCH_RADIUS
    use_3d: bool = False
    alpha_lateral: float = ALPHA_LATERAL
    alpha_axial: float = ALPHA_AXIAL
    frc_threshold: float = FRC_THRESHOLD
    frc_block_size: int = 50000
    frc_pixel_size: float = 10.0
    frc_sigma: float = 8.5


def _default_psf():
    return {"kind": "as", "params": dataclasses.asdict(PsfAsParams.from_widths(120.0, 400.0))}


def _default_camera():
    return {"type": "emccd", "baseline": 100.0, "em_gain": 300.0, "e_per_count": 45.0, "background": 50.0}


@dataclass(frozen=True)
class PipelineConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    psf: dict = field(default_factory=_default_psf)  # PSF JSON document, or {"file": path}
    camera: dict = field(default_factory=_default_camera)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    render: RenderSpec = field(default_factory=RenderSpec)
    base_dir: str = "."  # resolves relative file references; not part of the JSON

    def psf_model(self):
        if "file" in self.psf:
            path = Path(self.psf["file"])
            return read_psf(path if path.is_absolute() else Path(self.base_dir) / path)
        return psf_from_dict(self.psf, self.base_dir)

    def camera_model(self):
        try:
            return camera_from_dict(self.camera)
        except TypeError as exc:
            raise ConfigError(f"camera: {exc}") from None

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out


_SECTIONS = {f.name: f for f in dataclasses.fields(PipelineConfig) if f.name != "base_dir"}


def _coerce(value, annotation, where):
    """Minimal type check/coercion for JSON scalars against a dataclass annotation."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {annotation}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = args[0] if args else float
        items = tuple(_coerce(v, inner, where) for v in value)
        if len(args) > 1 and args[-1] is not Ellipsis and len(items) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(items)}")
        return items
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def section_from_dict(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    kwargs = {"base_dir": str(base_dir)}
    for name in ("prior", "localizer", "postprocess", "metrics", "render"):
        if name in doc:
            cls = typing.get_type_hints(PipelineConfig)[name]
            kwargs[name] = section_from_dict(cls, doc[name], name)
    for name in ("psf", "camera"):
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"{name}: expected an object")
            kwargs[name] = dict(doc[name])
    cfg = PipelineConfig(**kwargs)
    _validate_models(cfg)
    return cfg


def _validate_models(cfg):
    # build once so a bad PSF/camera is reported before any run
    try:
        cfg.camera_model()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"camera: {exc}") from None
    if "file" in cfg.psf:
        if set(cfg.psf) != {"file"}:
            raise ConfigError("psf: a file reference takes no other keys")
        return
    try:
        model = cfg.psf_model()
    except (FormatError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"psf: {exc}") from None
    if not isinstance(model, PsfModel):
        raise ConfigError("psf: not a PSF document")


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(doc, path.parent)
