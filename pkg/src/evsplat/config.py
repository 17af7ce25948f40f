"""Run configuration: one INI file with sections plus ``section.key=value`` overrides.

Every default lives in the dataclasses below; ``default_text()`` renders the
full schema as an INI file.  Values are parsed according to the type of the
default (bool, int, float, str, or a comma-separated float tuple).
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .errors import InvalidParameterError
from .events import DEFAULT_CONTRAST
from .trainer import TrainConfig


@dataclass
class SceneSection:
    # "toy" for the procedural scene, otherwise a Gaussian cloud checkpoint
    source: str = "toy"
    toy_gaussians: int = 100
    toy_seed: int = 0


@dataclass
class CameraSection:
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    z_near: float = 2.0
    z_far: float = 6.5


@dataclass
class TrajectorySection:
    duration_us: int = 10_000_000
    radius: float = 4.0
    elevation_deg: float = 20.0
    speed_ratio: float = 1.0
    cycles: int = 2
    turns: float = 1.0
    wobble_deg: float = 0.0
    wobble_per_turn: int = 0
    pose_rate_hz: float = 50.0
    max_step_deg: float = 0.25
    heldout_views: int = 8
    heldout_elevation_offset_deg: float = 0.0


@dataclass
class EventsSection:
    contrast_threshold: float = DEFAULT_CONTRAST
    # Ornstein-Uhlenbeck pose noise (0 disables); sigma is the stationary std
    noise_rotation_deg: float = 0.0
    noise_translation: float = 0.0
    noise_theta: float = 1.0
    seed: int = 0


@dataclass
class EvalSection:
    align_poses: bool = False
    align_iters: int = 200
    align_lr: float = 1e-3


@dataclass
class GradcheckSection:
    scenes: int = 20
    gaussians: int = 12
    size: int = 16
    step: float = 1e-4
    seed: int = 0


SECTIONS = {
    "scene": SceneSection,
    "camera": CameraSection,
    "trajectory": TrajectorySection,
    "events": EventsSection,
    "train": TrainConfig,
    "eval": EvalSection,
    "gradcheck": GradcheckSection,
}


# Desk-scale settings for the procedural toy scene (64x64, about 100 Gaussians).
PRESETS = {
    "toy": {
        "train": {
            "total_iters": "5000",
            "n_gaussians": "2000",
            "n_max": "3000",
            "lr_sh_dc": "0.01",
            "densify_from": "100000",
        },
    },
}


@dataclass
class Config:
    scene: SceneSection = field(default_factory=SceneSection)
    camera: CameraSection = field(default_factory=CameraSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    events: EventsSection = field(default_factory=EventsSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InvalidParameterError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _apply(values: dict[str, dict[str, str]]) -> Config:
    kwargs = {}
    for name, cls in SECTIONS.items():
        given = dict(values.get(name, {}))
        defaults = {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
                    for f in dataclasses.fields(cls)}
        unknown = set(given) - set(defaults)
        if unknown:
            raise InvalidParameterError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        args = {k: _parse(v, defaults[k], f"{name}.{k}") for k, v in given.items()}
        kwargs[name] = cls(**args)
    unknown = set(values) - set(SECTIONS)
    if unknown:
        raise InvalidParameterError(f"unknown section(s): {', '.join(sorted(unknown))}")
    return Config(**kwargs)


def load_config(path=None, overrides=(), preset: str | None = None) -> Config:
    """Defaults, then ``preset``, then the file at ``path``, then ``section.key=value`` overrides."""
    cp = configparser.ConfigParser()
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidParameterError(f"unknown preset {preset!r}")
        cp.read_dict(PRESETS[preset])
    if path is not None:
        try:
            with open(path) as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as e:
            raise InvalidParameterError(f"cannot read config {path}: {e}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise InvalidParameterError(f"override {item!r} is not of the form section.key=value")
        values.setdefault(section, {})[name] = value
    return _apply(values)


def default_text() -> str:
    return Config().to_text()
