"""Latent codes, camera poses, ray bundles, depth samples and light draws.

Scene frame: the object sits at the origin inside the unit cube. The frontal
camera is at (0, 0, -radius) looking down +z; world +y is up. Pixel (u, v) has
u growing to the right and v growing downward. Light directions point from the
surface toward the light, so the frontal light is (0, 0, -1).

Every function here is a pure function of its numpy Generator, so per-thread
streams (``np.random.default_rng([seed, index])``) give reproducible draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol

import numpy as np

if TYPE_CHECKING:
    from run_config import CameraConfig, LightConfig

WORLD_UP = np.array([0.0, 1.0, 0.0])
LIGHT_Z = -1.0


class UniformSource(Protocol):
    def random(self, size=None) -> np.ndarray: ...


# ───────────────────────── latents ─────────────────────────

def sample_latent(rng: np.random.Generator, batch: int, dim: int) -> np.ndarray:
    """Standard-normal latent codes, shape (batch, dim)."""
    return rng.standard_normal((batch, dim))


# ───────────────────────── cameras ─────────────────────────

@dataclass(frozen=True)
class CameraPose:
    pitch: float
    yaw: float
    radius: float = 1.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")

    @property
    def position(self) -> np.ndarray:
        cp = math.cos(self.pitch)
        offset = np.array([cp * math.sin(self.yaw), math.sin(self.pitch), -cp * math.cos(self.yaw)])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * offset

    @property
    def rotation(self) -> np.ndarray:
        """Columns: camera right, up, back (camera looks along -back)."""
        forward = np.asarray(self.look_at, dtype=np.float64) - self.position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, WORLD_UP)
        n = np.linalg.norm(right)
        # straight up/down: any horizontal right vector will do
        right = right / n if n > 1e-12 else np.array([-1.0, 0.0, 0.0])
        up = np.cross(right, forward)
        return np.stack([right, up, -forward], axis=1)

    @property
    def matrix(self) -> np.ndarray:
        """3x4 camera-to-world transform [R | t]."""
        return np.concatenate([self.rotation, self.position[:, None]], axis=1)

    @classmethod
    def parse(cls, text: str, radius: float = 1.0) -> CameraPose:
        """``"pitch,yaw"`` in radians (CLI form)."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"camera must be 'pitch,yaw', got {text!r}")
        return cls(parts[0], parts[1], radius)


def sample_camera(rng: np.random.Generator, cfg: CameraConfig) -> CameraPose:
    if not cfg.radius > 0:
        raise ValueError(f"camera radius must be positive, got {cfg.radius}")
    if cfg.dist == "gaussian":
        pitch = float(rng.normal(0.0, cfg.sigma_v))
        yaw = float(rng.normal(0.0, cfg.sigma_h))
    elif cfg.dist == "uniform":
        pitch = float(rng.uniform(*cfg.range_v))
        yaw = float(rng.uniform(*cfg.range_h))
    else:
        raise ValueError(f"unknown camera distribution {cfg.dist!r}")
    return CameraPose(pitch, yaw, cfg.radius)


# ───────────────────────── rays ─────────────────────────

@dataclass(frozen=True, eq=False)
class RayBundle:
    origins: np.ndarray     # (R, 3)
    directions: np.ndarray  # (R, 3), unit
    pixels: np.ndarray      # (R, 2) integer (u, v)
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.origins)

    def crop(self, top: int, left: int, size: int) -> RayBundle:
        """Contiguous ``size`` x ``size`` patch of a full-frame bundle."""
        if top < 0 or left < 0 or top + size > self.height or left + size > self.width:
            raise ValueError(f"patch ({top},{left})+{size} outside {self.width}x{self.height} frame")
        rows = np.arange(top, top + size)[:, None] * self.width + np.arange(left, left + size)[None, :]
        idx = rows.reshape(-1)
        return RayBundle(self.origins[idx], self.directions[idx], self.pixels[idx], size, size)


def generate_rays(pose: CameraPose, width: int, height: int, fov_deg: float) -> RayBundle:
    """One pinhole ray per pixel center, row-major (v outer, u inner)."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov must be in (0, 180) degrees, got {fov_deg}")
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    v, u = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = (u + 0.5 - width / 2.0) / focal
    y = -(v + 0.5 - height / 2.0) / focal
    local = np.stack([x, y, -np.ones_like(x, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs = local @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    pixels = np.stack([u.reshape(-1), v.reshape(-1)], axis=-1)
    return RayBundle(origins, dirs, pixels, width, height)


def random_patch(rng: np.random.Generator, width: int, height: int, size: int) -> tuple[int, int]:
    """Top-left corner of a uniformly placed square patch."""
    if size > min(width, height):
        raise ValueError(f"patch {size} larger than frame {width}x{height}")
    return int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1))


# ───────────────────────── depth samples ─────────────────────────

@dataclass(frozen=True, eq=False)
class PointSamples:
    """Sorted depths per ray plus the interval length each sample stands for.

    Sample j covers [t_j, t_j + delta_j]; the last interval ends at ``far``.
    """

    depths: np.ndarray  # (..., N)
    deltas: np.ndarray  # (..., N)
    near: float
    far: float

    @property
    def count(self) -> int:
        return self.depths.shape[-1]

    @classmethod
    def from_depths(cls, depths: np.ndarray, near: float, far: float) -> PointSamples:
        gaps = np.diff(depths, axis=-1)
        last = np.maximum(far - depths[..., -1:], 1e-9)
        return cls(depths, np.concatenate([gaps, last], axis=-1), near, far)

    def positions(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """x_j = o + t_j d, shape (..., N, 3) for rays shaped (..., 3)."""
        return origins[..., None, :] + self.depths[..., :, None] * directions[..., None, :]


def stratified_sample(shape: int | tuple[int, ...], near: float, far: float, n_samples: int,
                      rng: UniformSource) -> PointSamples:
    """One uniform draw per equal-width bin of [near, far] for each ray in ``shape``."""
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    if n_samples < 1:
        raise ValueError(f"need at least one sample per ray, got {n_samples}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    width = (far - near) / n_samples
    lower = near + width * np.arange(n_samples)
    depths = lower + width * np.asarray(rng.random(shape + (n_samples,)), dtype=np.float64)
    return PointSamples.from_depths(depths, near, far)


def hierarchical_resample(coarse: PointSamples, weights: np.ndarray, n_fine: int,
                          rng: UniformSource, eps: float = 1e-10) -> PointSamples:
    """Inverse-CDF draws over the piecewise-constant weight density, merged with ``coarse``.

    Rays whose total weight is <= eps fall back to a density uniform in depth.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != coarse.depths.shape:
        raise ValueError(f"weights shape {weights.shape} != samples shape {coarse.depths.shape}")
    if np.any(weights < 0):
        raise ValueError("hierarchical_resample: negative weights")
    if n_fine <= 0:
        return coarse
    total = weights.sum(axis=-1, keepdims=True)
    pdf = np.where(total > eps, weights / np.where(total > eps, total, 1.0),
                   coarse.deltas / coarse.deltas.sum(axis=-1, keepdims=True))
    cdf = np.cumsum(pdf, axis=-1)
    cdf = np.concatenate([np.zeros_like(cdf[..., :1]), cdf], axis=-1)
    cdf[..., -1] = 1.0
    u = np.asarray(rng.random(coarse.depths.shape[:-1] + (n_fine,)), dtype=np.float64)
    idx = np.sum(cdf[..., None, 1:-1] <= u[..., :, None], axis=-1)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    mass = np.take_along_axis(pdf, idx, axis=-1)
    frac = np.where(mass > 0, (u - lo) / np.where(mass > 0, mass, 1.0), 0.5)
    fine = (np.take_along_axis(coarse.depths, idx, axis=-1)
            + np.clip(frac, 0.0, 1.0) * np.take_along_axis(coarse.deltas, idx, axis=-1))
    merged = np.sort(np.concatenate([coarse.depths, np.minimum(fine, coarse.far)], axis=-1), axis=-1)
    return PointSamples.from_depths(merged, coarse.near, coarse.far)


# ───────────────────────── lights ─────────────────────────

@dataclass(frozen=True, eq=False)
class LightCondition:
    ka: float
    kd: float
    direction: np.ndarray  # unit, surface -> light

    def __post_init__(self):
        if not (math.isfinite(self.ka) and math.isfinite(self.kd)) or self.ka < 0 or self.kd < 0:
            raise ValueError(f"light intensities must be finite and >= 0, got ka={self.ka} kd={self.kd}")
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"light direction must be unit length, got norm {n}")

    @classmethod
    def from_xy(cls, ka: float, kd: float, x: float, y: float, z: float = LIGHT_Z) -> LightCondition:
        v = np.array([x, y, z], dtype=np.float64)
        return cls(ka, kd, v / np.linalg.norm(v))

    @classmethod
    def parse(cls, text: str) -> LightCondition:
        """``"ka,kd,x,y,z"`` with an unnormalized direction (CLI form)."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError(f"light must be 'ka,kd,x,y,z', got {text!r}")
        ka, kd, *xyz = parts
        v = np.array(xyz)
        if np.linalg.norm(v) == 0:
            raise ValueError("light direction must be non-zero")
        return cls(ka, kd, v / np.linalg.norm(v))


def sample_light(rng: np.random.Generator, cfg: LightConfig) -> LightCondition:
    while True:
        x = float(rng.normal(cfg.mu_x, cfg.sigma_x))
        y = float(rng.normal(cfg.mu_y, cfg.sigma_y))
        v = np.array([x, y, LIGHT_Z])
        n = np.linalg.norm(v)
        if n > 0:
            break
    ka = float(rng.uniform(cfg.ka_min, cfg.ka_max))
    kd = float(rng.uniform(cfg.kd_min, cfg.kd_max))
    return LightCondition(ka, kd, v / n)


def stack_lights(lights: list[LightCondition]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ka (B,), kd (B,), directions (B, 3)) for a batch of lights."""
    return (np.array([l.ka for l in lights]), np.array([l.kd for l in lights]),
            np.stack([l.direction for l in lights]))
