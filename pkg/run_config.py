"""Run configuration: one flat ``section.key = value`` file plus ``--set`` overrides.

Resolution order (later wins): model defaults, the named dataset profile,
keys from the config file, command-line overrides. Unknown keys are errors.
"""
from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

import profiles


class ConfigError(ValueError):
    """Unparseable or invalid run configuration."""


def get_int_env(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        logging.warning("Invalid integer for %s=%s, using default=%d", name, value, default)
        return default


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraConfig(_Section):
    dist: Literal["gaussian", "uniform"] = "gaussian"
    sigma_v: float = 0.15
    sigma_h: float = 0.3
    range_v: tuple[float, float] = (-0.5, 0.5)
    range_h: tuple[float, float] = (-0.4, 0.4)
    fov_deg: float = 12.0
    radius: float = 1.0

    @field_validator("range_v", "range_h", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)


class RayConfig(_Section):
    near: float = 0.88
    far: float = 1.12
    samples: int = 12
    fine_samples: int = 12


class LightConfig(_Section):
    mu_x: float = 0.0
    sigma_x: float = 0.27
    mu_y: float = 0.39
    sigma_y: float = 0.07
    ka_min: float = 0.5
    ka_max: float = 0.9
    kd_min: float = 0.3
    kd_max: float = 0.9


class NetConfig(_Section):
    latent_dim: int = 256
    hidden_dim: int = 256
    layers: int = 8
    mapping_dim: int = 256
    mapping_layers: int = 3
    normal_hidden: int = 16
    specular: Literal["on", "off"] = "on"
    view_dependent: Literal["on", "off", "stage1"] = "stage1"
    shininess_scale: float = 20.0
    fd_step: float = 1e-3
    normal_source: Literal["predicted", "density"] = "predicted"


class TrainConfig(_Section):
    batch: int = 8
    iters_stage1: int = 2000
    iters_stage2: int = 500
    lr_g: float = 6e-5
    lr_d: float = 2e-4
    r1: float = 10.0
    lambda_tv: float = 0.5
    lambda_n: float = 20.0
    seed: int = 0
    patch: int = 32
    d_widths: tuple[int, ...] = (32, 64, 128, 256)
    ckpt_every: int = 250
    g_loss: Literal["minimax", "non_saturating"] = "minimax"
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("d_widths", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)


class RenderConfig(_Section):
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    a_min: float = 0.05
    resolution: int = 64
    chunk: int = 1024

    @field_validator("background", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)


class MeshConfig(_Section):
    resolution: int = 64
    bound: float = 0.8
    threshold: float = 20.0
    sweep: tuple[float, ...] = tuple(float(t) for t in range(10, 201, 10))

    @field_validator("sweep", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)


class DataConfig(_Section):
    count: int = 500
    resolution: int = 32
    shapes: tuple[Literal["sphere", "superellipsoid", "dented"], ...] = ("sphere", "superellipsoid", "dented")
    radius_min: float = 0.35
    radius_max: float = 0.45
    specular_max: float = 0.3
    shininess_max: float = 1.0
    two_tone: float = 0.5

    @field_validator("shapes", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)


class RunConfig(_Section):
    profile: str = "celeba"
    camera: CameraConfig = CameraConfig()
    ray: RayConfig = RayConfig()
    light: LightConfig = LightConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    render: RenderConfig = RenderConfig()
    mesh: MeshConfig = MeshConfig()
    data: DataConfig = DataConfig()

    @field_validator("profile")
    @classmethod
    def known_profile(cls, value: str) -> str:
        profiles.get_profile(value)
        return value


SECTIONS = tuple(name for name in RunConfig.model_fields if name != "profile")


def parse_conf_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def build_config(flat: dict[str, str]) -> RunConfig:
    """Validate flat keys (profile defaults applied first)."""
    name = flat.get("profile", RunConfig.model_fields["profile"].default)
    try:
        merged = profiles.get_profile(name).config_keys()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    merged.update(flat)
    nested: dict[str, Any] = {}
    for key, value in merged.items():
        if key == "profile":
            nested["profile"] = value
            continue
        section, dot, field = key.partition(".")
        if not dot or section not in SECTIONS or "." in field:
            raise ConfigError(f"unknown config key {key!r}")
        nested.setdefault(section, {})[field] = value
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    flat: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        flat = parse_conf_text(text, str(path))
    flat.update(parse_overrides(overrides))
    return build_config(flat)


def _format(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: RunConfig) -> str:
    """Every resolved key, sorted; the output loads back to an equal config."""
    lines = [f"profile = {cfg.profile}"]
    for section in SECTIONS:
        for key, value in sorted(getattr(cfg, section).model_dump().items()):
            lines.append(f"{section}.{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def write_resolved(cfg: RunConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.conf"
    tmp = path.with_suffix(".conf.tmp")
    tmp.write_text(dump_config(cfg), encoding="utf-8")
    tmp.replace(path)
    return path
