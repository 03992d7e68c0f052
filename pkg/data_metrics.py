"""Synthetic scenes with exact ground truth, an analytic test field, and evaluation metrics.

Scenes are rendered in closed form (ray/shape intersection, exact normals)
with the same ambient + diffuse + mirror shading the volume renderer uses, so
they double as oracles for it.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

import tensor_core as tc
from generator import FactorizedSample
from renderer import RenderSettings, render_image
from run_config import RunConfig, config_hash
from scene_sampling import CameraPose, LightCondition, PointSamples, generate_rays, sample_camera, sample_light
from tensor_core import Tensor

log = logging.getLogger(__name__)

DATASET_FORMAT = "pgan-dataset-1"
SHELL_OPTICAL_DEPTH = 20.0
DEPTH_SENTINEL = 0.0
FRONTAL = np.array([0.0, 0.0, -1.0])
FEATURE_SIZE = 8
DENT_UNDERCUT = 0.5  # outward lean of the pit walls per unit depth

Shape = Literal["sphere", "superellipsoid", "dented"]


# ───────────────────────── scenes ─────────────────────────

def _sphere_hits(origins: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float):
    """Entry and exit distances of each ray through a ball; inf where missed."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.where(hit, -b - root, np.inf)
    t1 = np.where(hit, -b + root, np.inf)
    return t0, t1


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """A closed shape at the origin with a solid or two-tone albedo.

    The dented shape is a ball with a pit cut into it around ``dent_axis``.
    The pit opening is the cap within ``dent_width`` radians of the axis; its
    floor is a concave spherical cap of the ball's own radius, ``dent_depth``
    below the surface, and its walls lean outward with depth so a camera
    facing the dent does not see them. Without an explicit ``dent_depth`` the
    floor meets the rim and the dent is the mirror image of the removed cap.
    """

    shape: Shape = "sphere"
    radius: float = 0.5
    exponent: float = 2.0
    dent_axis: np.ndarray = field(default_factory=lambda: FRONTAL.copy())
    dent_width: float = 0.3
    dent_depth: float | None = None
    albedo: np.ndarray = field(default_factory=lambda: np.ones(3))
    albedo2: np.ndarray | None = None
    specular: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"scene radius must be positive, got {self.radius}")
        if self.shape == "superellipsoid" and self.exponent < 2:
            raise ValueError(f"superellipsoid exponent must be >= 2, got {self.exponent}")
        if self.shape == "dented":
            if not 0 < self.dent_width < math.pi / 2:
                raise ValueError(f"dent width must be in (0, pi/2), got {self.dent_width}")
            if self.dent_depth is not None:
                if self.dent_depth < self.mirror_depth - 1e-12:
                    raise ValueError(f"dent depth too shallow for its width (minimum {self.mirror_depth:.6g})")
                if self.dent_depth >= 2.0 * self.radius:
                    raise ValueError("dent depth must be smaller than the diameter")

    @property
    def axis(self) -> np.ndarray:
        axis = np.asarray(self.dent_axis, dtype=np.float64)
        return axis / np.linalg.norm(axis)

    @property
    def mirror_depth(self) -> float:
        return 2.0 * self.radius * (1.0 - math.cos(self.dent_width))

    @property
    def carve(self) -> tuple[np.ndarray, float]:
        """Center and radius of the ball whose surface is the dent floor."""
        depth = self.mirror_depth if self.dent_depth is None else self.dent_depth
        return (2.0 * self.radius - depth) * self.axis, self.radius

    @property
    def depth_of_dent(self) -> float:
        center, rb = self.carve
        return self.radius - (float(np.linalg.norm(center)) - rb)

    def _wall(self, p: np.ndarray) -> np.ndarray:
        """Signed distance to the pit wall cone, negative inside the opening."""
        axis = self.axis
        a = p @ axis
        lateral = np.linalg.norm(p - a[..., None] * axis, axis=-1)
        w = self.dent_width
        apex = self.radius * (math.cos(w) + math.sin(w) / DENT_UNDERCUT)
        return (lateral - DENT_UNDERCUT * (apex - a)) / math.hypot(1.0, DENT_UNDERCUT)

    def _carved(self, p: np.ndarray) -> np.ndarray:
        center, rb = self.carve
        return (np.linalg.norm(p - center, axis=-1) < rb) & (self._wall(p) < 0)

    def inside(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.shape == "superellipsoid":
            return self._implicit(p) <= 0
        inside = np.linalg.norm(p, axis=-1) <= self.radius
        if self.shape == "dented":
            inside &= ~self._carved(p)
        return inside

    def _implicit(self, p: np.ndarray) -> np.ndarray:
        return (np.abs(p / self.radius) ** self.exponent).sum(axis=-1) - 1.0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First surface distance per ray (inf on miss) and the outward normal there."""
        if self.shape == "superellipsoid":
            t0, t1 = _sphere_hits(origins, dirs, np.zeros(3), self.radius * math.sqrt(3.0))
            rays = np.nonzero(np.isfinite(t0))[0]
            t = np.full(len(origins), np.inf)
            if len(rays):
                t[rays] = self._march(origins[rays], dirs[rays], t0[rays], t1[rays])
        else:
            t0, t1 = _sphere_hits(origins, dirs, np.zeros(3), self.radius)
            t = t0.copy()
            if self.shape == "dented":
                entry = origins + np.where(np.isfinite(t0), t0, 0.0)[:, None] * dirs
                rays = np.nonzero(np.isfinite(t0) & self._carved(entry))[0]
                if len(rays):
                    t[rays] = self._march(origins[rays], dirs[rays], t0[rays], t1[rays])
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        return t, np.where(np.isfinite(t)[:, None], self.normal(p), 0.0)

    def _march(self, origins: np.ndarray, dirs: np.ndarray, t_near: np.ndarray, t_far: np.ndarray,
               steps: int = 256, iterations: int = 48) -> np.ndarray:
        """First empty-to-solid crossing along each ray in [t_near, t_far]; inf where none."""
        ts = t_near[:, None] + (t_far - t_near)[:, None] * np.linspace(0.0, 1.0, steps)[None]
        solid = self.inside(origins[:, None] + ts[..., None] * dirs[:, None])
        crossing = ~solid[:, :-1] & solid[:, 1:]
        has = crossing.any(axis=1)
        first = np.argmax(crossing, axis=1)
        rows = np.arange(len(ts))
        lo, hi = ts[rows, first], ts[rows, first + 1]
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            solid_mid = self.inside(origins + mid[:, None] * dirs)
            lo, hi = np.where(solid_mid, lo, mid), np.where(solid_mid, mid, hi)
        return np.where(has, hi, np.inf)

    def normal(self, points: np.ndarray) -> np.ndarray:
        """Outward normal of the nearest surface; exact on the surface, defined everywhere."""
        p = np.asarray(points, dtype=np.float64)
        if self.shape == "superellipsoid":
            g = np.sign(p) * np.abs(p / self.radius) ** (self.exponent - 1.0)
        else:
            g = p.copy()
            if self.shape == "dented":
                center, rb = self.carve
                axis = self.axis
                gaps = np.stack([np.abs(np.linalg.norm(p, axis=-1) - self.radius),
                                 np.abs(np.linalg.norm(p - center, axis=-1) - rb),
                                 np.abs(self._wall(p))])
                nearest = np.argmin(gaps, axis=0)
                lateral = p - (p @ axis)[..., None] * axis
                lateral = lateral / np.maximum(np.linalg.norm(lateral, axis=-1, keepdims=True), 1e-12)
                g = np.where((nearest == 1)[..., None], center - p, g)
                g = np.where((nearest == 2)[..., None], -(lateral + DENT_UNDERCUT * axis), g)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def albedo_at(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        base = np.broadcast_to(self.albedo, p.shape)
        if self.albedo2 is None:
            return base.copy()
        return np.where(p[..., :1] > 0, self.albedo2, base)


@dataclass(eq=False)
class DatasetRecord:
    image: np.ndarray    # (H, W, 3) in [0, 1]
    depth: np.ndarray    # (H, W) ray distance, DEPTH_SENTINEL off the object
    normal: np.ndarray   # (H, W, 3)
    albedo: np.ndarray   # (H, W, 3)
    mask: np.ndarray     # (H, W) bool
    camera: CameraPose
    light: LightCondition


def phong(albedo: np.ndarray, normals: np.ndarray, view: np.ndarray, light: LightCondition,
          specular: tuple[float, float] | np.ndarray, shininess_scale: float = 20.0) -> np.ndarray:
    """albedo * (ka + kd <n, l>+) + kd s0 <r, v>+^(1 + scale s1), per pixel."""
    cos = normals @ light.direction
    shade = light.ka + light.kd * np.maximum(cos, 0.0)
    reflect = 2.0 * cos[..., None] * normals - light.direction
    s = np.asarray(specular, dtype=np.float64)
    spec = light.kd * s[..., 0] * np.maximum(np.einsum("...k,...k->...", reflect, view), 0.0) ** (
        1.0 + shininess_scale * s[..., 1])
    return albedo * shade[..., None] + spec[..., None]


def render_analytic(scene: SyntheticScene, camera: CameraPose, light: LightCondition, width: int, height: int,
                    fov_deg: float = 30.0, background=(1.0, 1.0, 1.0),
                    shininess_scale: float = 20.0) -> DatasetRecord:
    bundle = generate_rays(camera, width, height, fov_deg)
    t, normals = scene.intersect(bundle.origins, bundle.directions)
    mask = np.isfinite(t)
    points = bundle.origins + np.where(mask, t, 0.0)[:, None] * bundle.directions
    albedo = np.where(mask[:, None], scene.albedo_at(points), 0.0)
    color = phong(albedo, normals, -bundle.directions, light, scene.specular, shininess_scale)
    image = np.where(mask[:, None], np.clip(color, 0.0, 1.0), np.asarray(background, dtype=np.float64))
    return DatasetRecord(
        image=image.reshape(height, width, 3),
        depth=np.where(mask, t, DEPTH_SENTINEL).reshape(height, width),
        normal=normals.reshape(height, width, 3),
        albedo=albedo.reshape(height, width, 3),
        mask=mask.reshape(height, width),
        camera=camera,
        light=light,
    )


# ───────────────────────── analytic field ─────────────────────────

class AnalyticField:
    """Closed-form stand-in for the generator, usable wherever the renderer takes a field.

    ``kind="solid"``: constant density inside the scene's shape.
    ``kind="blob"``: radial Gaussian ``peak * exp(-|x|^2 / (2 width^2))``.
    ``kind="smooth-sphere"``: ``peak * sigmoid((radius - |x|) / width)``.
    Features carry the exact normal in their first three channels, and
    ``normal_predict`` just renormalizes them.
    """

    def __init__(self, scene: SyntheticScene | None = None, kind: str = "solid", *,
                 sigma: float = 1.0, peak: float = 100.0, width: float = 0.25, shade_color: bool = False):
        if kind not in ("solid", "blob", "smooth-sphere"):
            raise ValueError(f"unknown analytic field kind {kind!r}")
        self.scene = scene or SyntheticScene()
        self.kind = kind
        self.sigma = sigma
        self.peak = peak
        self.width = width
        self.shade_color = shade_color

    def map_latent(self, z):
        return None

    def density_values(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "solid":
            return np.where(self.scene.inside(p), self.sigma, 0.0)
        r = np.linalg.norm(p, axis=-1)
        if self.kind == "blob":
            return self.peak * np.exp(-r * r / (2.0 * self.width ** 2))
        return self.peak / (1.0 + np.exp(-(self.scene.radius - r) / self.width))

    def _normals(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "solid":
            return self.scene.normal(p)
        return p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)

    def density(self, points, m=None) -> Tensor:
        p = tc.as_tensor(points).data
        return Tensor(self.density_values(p)[..., None])

    def query(self, points, m=None, view_dirs=None, *, color: bool = False,
              zero_view: bool = False) -> FactorizedSample:
        p = tc.as_tensor(points).data
        sigma = Tensor(self.density_values(p)[..., None])
        albedo = self.scene.albedo_at(p)
        if color:
            sample = FactorizedSample(sigma=sigma, albedo=None, feature=None, specular=None)
            sample.color = Tensor(albedo)
            return sample
        normals = self._normals(p)
        feature = np.concatenate([normals, np.zeros(p.shape[:-1] + (1,))], axis=-1)
        spec = np.broadcast_to(np.asarray(self.scene.specular, dtype=np.float64), p.shape[:-1] + (2,))
        return FactorizedSample(sigma=sigma, albedo=Tensor(albedo), feature=Tensor(feature),
                                specular=Tensor(spec.copy()))

    def normal_predict(self, features) -> tuple[Tensor, int]:
        f = tc.as_tensor(features).data[..., :3]
        n = np.linalg.norm(f, axis=-1, keepdims=True)
        return Tensor(f / np.maximum(n, 1e-12)), 0


def shell_depths(scene: SyntheticScene, near: float, far: float, thickness: float = 1e-4):
    """Depth provider placing two samples just inside the first surface.

    The field's density must be ``SHELL_OPTICAL_DEPTH / thickness`` inside,
    so the first sample is opaque. Rays that miss sample at ``far``.
    """
    def provide(origins: np.ndarray, dirs: np.ndarray) -> PointSamples:
        shape = origins.shape[:-1]
        t, _ = scene.intersect(origins.reshape(-1, 3), dirs.reshape(-1, 3))
        start = np.where(np.isfinite(t), t + 0.5 * thickness, far)
        depths = np.stack([start, start + thickness], axis=-1).reshape(shape + (2,))
        return PointSamples(depths, np.full(depths.shape, thickness), near, far + 2 * thickness)

    return provide


def opaque_shell_field(scene: SyntheticScene, thickness: float = 1e-4) -> AnalyticField:
    return AnalyticField(scene, "solid", sigma=SHELL_OPTICAL_DEPTH / thickness)


# ───────────────────────── datasets ─────────────────────────

def random_scene(rng: np.random.Generator, cfg: RunConfig) -> SyntheticScene:
    data = cfg.data
    shape = str(rng.choice(list(data.shapes)))
    radius = float(rng.uniform(data.radius_min, data.radius_max))
    albedo = rng.uniform(0.2, 0.9, 3)
    albedo2 = rng.uniform(0.2, 0.9, 3) if rng.random() < data.two_tone else None
    if cfg.net.specular == "on":
        specular = (float(rng.uniform(0.0, data.specular_max)), float(rng.uniform(0.0, data.shininess_max)))
    else:
        specular = (0.0, 0.0)
    scene = SyntheticScene(shape=shape, radius=radius, albedo=albedo, albedo2=albedo2, specular=specular)
    if shape == "superellipsoid":
        scene = replace(scene, exponent=float(rng.uniform(2.5, 4.0)))
    elif shape == "dented":
        axis = FRONTAL + np.array([rng.normal(0, 0.3), rng.normal(0, 0.3), 0.0])
        scene = replace(scene, dent_axis=axis / np.linalg.norm(axis), dent_width=float(rng.uniform(0.25, 0.45)))
    return scene


def write_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _make_record(cfg: RunConfig, out_dir: Path, seed: int, index: int) -> dict:
    rng = np.random.default_rng([seed, index])
    scene = random_scene(rng, cfg)
    camera = sample_camera(rng, cfg.camera)
    light = sample_light(rng, cfg.light)
    res = cfg.data.resolution
    record = render_analytic(scene, camera, light, res, res, cfg.camera.fov_deg, cfg.render.background,
                             cfg.net.shininess_scale)
    name = f"{index:05d}"
    write_png(record.image, out_dir / "images" / f"{name}.png")
    gt = out_dir / "gt"
    tc.save_arrays({"depth": record.depth.astype(np.float32)}, gt / f"{name}.depth")
    tc.save_arrays({"normal": record.normal.astype(np.float32)}, gt / f"{name}.normal")
    tc.save_arrays({"albedo": record.albedo.astype(np.float32)}, gt / f"{name}.albedo")
    tc.save_arrays({"mask": record.mask.astype(np.float32)}, gt / f"{name}.mask")
    return {
        "id": name,
        "shape": scene.shape,
        "camera": [camera.pitch, camera.yaw, camera.radius],
        "light": [light.ka, light.kd, *light.direction.tolist()],
    }


def make_dataset(cfg: RunConfig, out_dir: Path, n: int | None = None, seed: int | None = None,
                 threads: int = 1) -> Path:
    """Render ``n`` records with per-record streams; output is independent of ``threads``."""
    n = cfg.data.count if n is None else n
    seed = cfg.train.seed if seed is None else seed
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda i: _make_record(cfg, out_dir, seed, i), range(n)))
    else:
        records = [_make_record(cfg, out_dir, seed, i) for i in range(n)]

    manifest = {
        "format": DATASET_FORMAT,
        "count": n,
        "seed": seed,
        "resolution": cfg.data.resolution,
        "fov_deg": cfg.camera.fov_deg,
        "config_hash": config_hash(cfg),
        "records": records,
    }
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    log.info("wrote %d records to %s", n, out_dir)
    return path


@dataclass(eq=False)
class Dataset:
    root: Path
    manifest: dict
    images: np.ndarray  # (N, H, W, 3)

    def __len__(self) -> int:
        return len(self.images)

    def ground_truth(self, index: int, name: str) -> np.ndarray:
        record = self.manifest["records"][index]["id"]
        return tc.load_arrays(self.root / "gt" / f"{record}.{name}")[name]

    def camera(self, index: int) -> CameraPose:
        pitch, yaw, radius = self.manifest["records"][index]["camera"]
        return CameraPose(pitch, yaw, radius)


def load_dataset(root: Path, limit: int | None = None) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root}: not a dataset manifest (format {manifest.get('format')!r})")
    records = manifest["records"][:limit] if limit else manifest["records"]
    if len(records) < 1:
        raise ValueError(f"{root}: dataset is empty")
    images = np.stack([read_png(root / "images" / f"{r['id']}.png") for r in records])
    return Dataset(root, manifest, images)


# ───────────────────────── metrics ─────────────────────────

def side(depth: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Scale-invariant depth error: std of log-depth residuals over the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("SIDE needs a non-empty mask")
    d, g = np.asarray(depth, dtype=np.float64)[mask], np.asarray(reference, dtype=np.float64)[mask]
    if np.any(d <= 0) or np.any(g <= 0):
        raise ValueError("SIDE needs strictly positive depths inside the mask")
    delta = np.log(d) - np.log(g)
    centered = delta - delta.mean()
    return float(math.sqrt(np.mean(centered * centered)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _regularized(cov: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        return cov + eps * np.eye(len(cov))
    return cov


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Squared Frechet distance between two Gaussians."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    cov_a, cov_b = _regularized(cov_a), _regularized(cov_b)
    root = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root @ cov_b @ root)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    return float(max(value, 0.0))


def downsample(images: np.ndarray, size: int = FEATURE_SIZE) -> np.ndarray:
    """Box-filter (N, H, W, C) images to (N, size, size, C)."""
    images = np.asarray(images, dtype=np.float64)
    out = images
    for axis in (1, 2):
        bins = np.array_split(np.arange(out.shape[axis]), size)
        starts = [b[0] for b in bins]
        counts = np.array([len(b) for b in bins], dtype=np.float64)
        shape = [1] * out.ndim
        shape[axis] = size
        out = np.add.reduceat(out, starts, axis=axis) / counts.reshape(shape)
    return out


def pixel_frechet(images_a: np.ndarray, images_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fit to 8x8-downsampled images."""
    if len(images_a) < 2 or len(images_b) < 2:
        raise ValueError("pixel Frechet distance needs at least 2 images per set")
    fa = downsample(images_a).reshape(len(images_a), -1)
    fb = downsample(images_b).reshape(len(images_b), -1)
    return frechet_distance(fa.mean(axis=0), np.cov(fa, rowvar=False),
                            fb.mean(axis=0), np.cov(fb, rowvar=False))


# ───────────────────────── dent experiment ─────────────────────────

def oblique_light(angle_deg: float, ka: float = 0.0, kd: float = 1.0) -> LightCondition:
    """Light rotated ``angle_deg`` from frontal toward +x."""
    a = math.radians(angle_deg)
    return LightCondition(ka, kd, np.array([math.sin(a), 0.0, -math.cos(a)]))


@dataclass(frozen=True)
class DentReport:
    frontal_difference: float
    oblique_difference: float

    @property
    def ratio(self) -> float:
        if self.oblique_difference == 0.0:
            return 1.0 if self.frontal_difference == 0.0 else math.inf
        return self.frontal_difference / self.oblique_difference

    def line(self) -> str:
        return (f"dent frontal_l2={self.frontal_difference:.6f} oblique_l2={self.oblique_difference:.6f} "
                f"ratio={self.ratio:.6f}")


def dent_experiment(intact, dented, lights: tuple[LightCondition, LightCondition], *,
                    camera: CameraPose | None = None, size: int = 64, fov_deg: float = 30.0,
                    render=None, sheet: Path | None = None) -> DentReport:
    """Compare two geometries under a frontal and an oblique light.

    ``intact``/``dented`` are scenes for the default closed-form renderer;
    pass ``render(geometry, camera, light, size) -> (H, W, 3)`` to compare
    anything else (for example two latent codes of a trained field).
    """
    camera = camera or CameraPose(0.0, 0.0, 1.0)
    if render is None:
        def render(scene, cam, light, res):
            return render_analytic(scene, cam, light, res, res, fov_deg).image

    images = [[render(g, camera, light, size) for g in (intact, dented)] for light in lights]
    diffs = [float(np.linalg.norm(a - b)) for a, b in images]
    report = DentReport(diffs[0], diffs[1])
    log.info(report.line())
    if sheet is not None:
        grid = np.concatenate([np.concatenate(row, axis=1) for row in images], axis=0)
        sheet.parent.mkdir(parents=True, exist_ok=True)
        write_png(grid, sheet)
    return report


def shell_oracle_error(scene: SyntheticScene, camera: CameraPose, light: LightCondition, size: int,
                       fov_deg: float = 30.0, background=(1.0, 1.0, 1.0), shininess_scale: float = 20.0,
                       thickness: float = 1e-4) -> float:
    """Max per-pixel gap between the volume renderer on an opaque shell and the closed form."""
    settings = RenderSettings(near=0.0, far=2.0 * camera.radius, samples=2, fine_samples=0,
                              shininess_scale=shininess_scale)
    bundle = generate_rays(camera, size, size, fov_deg)
    rendered = render_image(opaque_shell_field(scene, thickness), None, bundle, light, "photometric", settings,
                            np.random.default_rng(0), background=np.asarray(background, dtype=np.float64),
                            depths=shell_depths(scene, settings.near, settings.far, thickness))
    expected = render_analytic(scene, camera, light, size, size, fov_deg, background, shininess_scale)
    return float(np.abs(rendered.image.data[0] - expected.image).max())
