"""Volume integration of per-point parameters and photometric image composition.

Buffers are channels-last: per-pixel maps are (B, h, w, C), per-sample maps
(B, h, w, N[, C]). Rays inside one call share a patch size; every batch item
has its own camera, light and background.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Any, Literal, NamedTuple, Protocol

import numpy as np

import tensor_core as tc
from generator import FactorizedSample, density_gradient, unit_normals
from scene_sampling import (
    LightCondition,
    PointSamples,
    RayBundle,
    hierarchical_resample,
    stack_lights,
    stratified_sample,
)
from tensor_core import Tensor

log = logging.getLogger(__name__)

RenderMode = Literal["stage1-color", "photometric", "pi-gan-star"]
MODES = ("stage1-color", "photometric", "pi-gan-star")
GRADIENT_FLOOR = 1e-8

DepthProvider = Callable[[np.ndarray, np.ndarray], PointSamples]


class RadianceField(Protocol):
    """What the renderer needs from a field (the generator or an analytic stand-in)."""

    def map_latent(self, z) -> Any: ...

    def query(self, points, m, view_dirs=None, *, color: bool = False,
              zero_view: bool = False) -> FactorizedSample: ...

    def density(self, points, m) -> Tensor: ...

    def normal_predict(self, features) -> tuple[Tensor, int]: ...


@dataclass(frozen=True)
class RenderSettings:
    near: float = 0.88
    far: float = 1.12
    samples: int = 12
    fine_samples: int = 12
    a_min: float = 0.05
    shininess_scale: float = 20.0
    fd_step: float = 1e-3
    normal_source: str = "predicted"
    gradient_normals: bool = False

    @classmethod
    def from_config(cls, cfg, gradient_normals: bool = False) -> RenderSettings:
        return cls(near=cfg.ray.near, far=cfg.ray.far, samples=cfg.ray.samples,
                   fine_samples=cfg.ray.fine_samples, a_min=cfg.render.a_min,
                   shininess_scale=cfg.net.shininess_scale, fd_step=cfg.net.fd_step,
                   normal_source=cfg.net.normal_source, gradient_normals=gradient_normals)


class LightArrays(NamedTuple):
    ka: np.ndarray
    kd: np.ndarray
    direction: np.ndarray


def light_arrays(lights: LightCondition | Sequence[LightCondition], spatial_dims: int = 2) -> LightArrays:
    """Per-item light terms shaped to broadcast over (B, *spatial, C) buffers."""
    if isinstance(lights, LightCondition):
        return LightArrays(np.array(lights.ka), np.array(lights.kd), lights.direction)
    ka, kd, dirs = stack_lights(list(lights))
    shape = (len(ka),) + (1,) * spatial_dims
    return LightArrays(ka.reshape(shape + (1,)), kd.reshape(shape + (1,)), dirs.reshape(shape + (3,)))


@dataclass
class RenderBuffers:
    image: Tensor              # I, clamped to [0, 1]
    opacity: Tensor            # A = sum_j w_j
    depth: Tensor
    weights: Tensor            # per-sample w_j
    depths_t: np.ndarray       # per-sample t_j
    albedo: Tensor | None = None
    feature: Tensor | None = None
    specular: Tensor | None = None
    normal: Tensor | None = None
    shading: Tensor | None = None
    specular_map: Tensor | None = None
    color: Tensor | None = None
    sample_gradients: Tensor | None = None
    grad_normal: Tensor | None = None
    fallbacks: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[f.name] = value.data
            elif isinstance(value, np.ndarray):
                out[f.name] = value
        return out


# ───────────────────────── volume integration ─────────────────────────

def composite_weights(sigma, deltas) -> tuple[Tensor, Tensor, Tensor]:
    """alpha_j, transmittance tau_j and weights w_j along the last axis."""
    sigma, deltas = tc.as_tensor(sigma), tc.as_tensor(deltas)
    if np.any(sigma.data < 0):
        raise ValueError("composite_weights: negative density")
    if np.any(deltas.data < 0):
        raise ValueError("composite_weights: negative interval length")
    n = sigma.shape[-1]
    sd = sigma * deltas
    alpha = 1.0 - tc.exp(-sd)
    # exclusive cumulative sum: column j sums entries k < j
    tau = tc.exp(-(sd @ Tensor(np.triu(np.ones((n, n)), 1))))
    return alpha, tau, tau * alpha


def volume_render_param(weights, values) -> Tensor:
    """p_uv = sum_j w_j p_j for weights (..., N) and values (..., N, C)."""
    w, p = tc.as_tensor(weights), tc.as_tensor(values)
    if p.shape[:-1] != w.shape:
        raise tc.ShapeError("volume_render_param", w.shape, p.shape)
    return (w.reshape(w.shape + (1,)) * p).sum(axis=-2)


def render_depth(weights, depths, far: float, a_min: float = 0.05) -> Tensor:
    """sum_j w_j t_j, replaced by ``far`` where the opacity is below ``a_min``."""
    w = tc.as_tensor(weights)
    d = (w * tc.as_tensor(depths)).sum(axis=-1)
    valid = (w.data.sum(axis=-1) >= a_min).astype(w.data.dtype)
    return d * Tensor(valid) + Tensor((1.0 - valid) * far)


def gradient_normal_map(weights, gradients) -> Tensor:
    """sum_j w_j (-grad sigma_j / max(||grad sigma_j||, 1e-8))."""
    return volume_render_param(weights, -unit_normals(tc.as_tensor(gradients), GRADIENT_FLOOR))


# ───────────────────────── photometric terms ─────────────────────────

def _light(light) -> LightArrays:
    return light_arrays(light) if isinstance(light, LightCondition) else light


def shading_map(normals, light: LightCondition | LightArrays) -> Tensor:
    """H = k_a + k_d max{0, <l_d, n>}, shape (..., 1)."""
    ka, kd, l_d = _light(light)
    cos = (tc.as_tensor(normals) * Tensor(l_d)).sum(axis=-1, keepdims=True)
    return Tensor(ka) + Tensor(kd) * tc.maximum(cos, 0.0)


def specular_map(coeffs, normals, light: LightCondition | LightArrays, view_dirs,
                 shininess_scale: float = 20.0) -> Tensor:
    """S = k_d s0 max{0, <r, v>}^(1 + scale * s1) with r the mirrored light, shape (..., 1)."""
    ka, kd, l_d = _light(light)
    n, s = tc.as_tensor(normals), tc.as_tensor(coeffs)
    l = Tensor(np.broadcast_to(l_d, n.shape).copy())
    reflected = 2.0 * (n * l).sum(axis=-1, keepdims=True) * n - l
    cos = (reflected * tc.as_tensor(view_dirs)).sum(axis=-1, keepdims=True)
    exponent = 1.0 + shininess_scale * s[..., 1:2]
    return Tensor(kd) * s[..., 0:1] * tc.power(tc.maximum(cos, 0.0), exponent)


def compose_image(albedo, shading, specular, background=None) -> Tensor:
    """I = clamp(a H + S [+ background residual], 0, 1)."""
    raw = tc.as_tensor(albedo) * tc.as_tensor(shading) + tc.as_tensor(specular)
    if background is not None:
        raw = raw + background
    return tc.clamp(raw, 0.0, 1.0)


# ───────────────────────── pipeline ─────────────────────────

def _stack_rays(rays: RayBundle | Sequence[RayBundle]) -> tuple[np.ndarray, np.ndarray, int, int]:
    bundles = [rays] if isinstance(rays, RayBundle) else list(rays)
    shapes = {(b.height, b.width) for b in bundles}
    if len(shapes) != 1:
        raise ValueError(f"ray bundles in one batch must share a size, got {sorted(shapes)}")
    h, w = shapes.pop()
    return (np.stack([b.origins for b in bundles]), np.stack([b.directions for b in bundles]), h, w)


def render_pixel_batch(field: RadianceField, z, rays: RayBundle | Sequence[RayBundle],
                       lights: Sequence[LightCondition], mode: RenderMode, settings: RenderSettings,
                       rng: np.random.Generator, background=None,
                       depths: DepthProvider | None = None) -> RenderBuffers:
    """Coarse pass, hierarchical resampling, fine pass, then volume + photometric rendering.

    ``depths`` replaces the stratified/hierarchical sampler with fixed samples
    (used for opaque-shell oracles). ``background`` is (3,) or (B, 3).
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {', '.join(MODES)}")
    origins, dirs, h, w = _stack_rays(rays)
    b, r = origins.shape[:2]
    if len(lights) != b:
        raise ValueError(f"{len(lights)} lights for {b} ray bundles")
    m = field.map_latent(z)

    if depths is not None:
        samples = depths(origins, dirs)
    else:
        samples = stratified_sample((b, r), settings.near, settings.far, settings.samples, rng)
        if settings.fine_samples > 0:
            with tc.no_grad():
                pts = samples.positions(origins, dirs).reshape(b, -1, 3)
                sigma = field.density(Tensor(pts), m).reshape(b, r, samples.count)
                coarse_w = composite_weights(sigma, samples.deltas)[2].data
            samples = hierarchical_resample(samples, coarse_w, settings.fine_samples, rng)
    n = samples.count
    points = Tensor(samples.positions(origins, dirs).reshape(b, r * n, 3))

    color_mode = mode != "photometric"
    view = Tensor(np.broadcast_to(dirs[:, :, None, :], (b, r, n, 3)).reshape(b, r * n, 3))
    sample = field.query(points, m, view, color=color_mode, zero_view=mode == "pi-gan-star")
    sigma = sample.sigma.reshape(b, r, n)
    _, _, weights = composite_weights(sigma, samples.deltas)
    opacity = weights.sum(axis=-1)
    depth = render_depth(weights, samples.depths, settings.far, settings.a_min)

    bg = np.ones(3) if background is None else np.asarray(background, dtype=np.float64)
    bg_term = (1.0 - opacity).reshape(b, r, 1) * Tensor(np.broadcast_to(bg, (b, 3)).reshape(b, 1, 3))

    def per_pixel(t: Tensor | None, c: int) -> Tensor | None:
        return None if t is None else volume_render_param(weights, t.reshape(b, r, n, c))

    out = RenderBuffers(image=Tensor(np.zeros((b, r, 3))), opacity=opacity, depth=depth,
                        weights=weights, depths_t=samples.depths)
    grads = None
    if not color_mode and (settings.gradient_normals or settings.normal_source == "density"):
        grads = density_gradient(lambda p: field.density(p, m), points, settings.fd_step).reshape(b, r, n, 3)
        out.sample_gradients = grads
        out.grad_normal = gradient_normal_map(weights, grads)

    if color_mode:
        assert sample.color is not None
        out.color = per_pixel(sample.color, 3)
        out.image = tc.clamp(out.color + bg_term, 0.0, 1.0)
    else:
        out.albedo = per_pixel(sample.albedo, 3)
        out.feature = per_pixel(sample.feature, 4)
        out.specular = per_pixel(sample.specular, 2)
        if settings.normal_source == "density":
            assert out.grad_normal is not None
            out.normal = unit_normals(out.grad_normal, GRADIENT_FLOOR)
        else:
            out.normal, out.fallbacks = field.normal_predict(out.feature)
        light = light_arrays(lights, spatial_dims=1)
        out.shading = shading_map(out.normal, light)
        if out.specular is not None:
            out.specular_map = specular_map(out.specular, out.normal, light, Tensor(-dirs),
                                            settings.shininess_scale)
        else:
            out.specular_map = Tensor(np.zeros((b, r, 1)))
        out.image = compose_image(out.albedo, out.shading, out.specular_map, bg_term)
    return _reshape_buffers(out, b, h, w)


def _reshape_buffers(out: RenderBuffers, b: int, h: int, w: int) -> RenderBuffers:
    for f in fields(out):
        value = getattr(out, f.name)
        if isinstance(value, Tensor):
            setattr(out, f.name, value.reshape((b, h, w) + value.shape[2:]))
        elif isinstance(value, np.ndarray):
            setattr(out, f.name, value.reshape((b, h, w) + value.shape[2:]))
    return out


def render_image(field: RadianceField, z, bundle: RayBundle, light: LightCondition,
                 mode: RenderMode, settings: RenderSettings, rng: np.random.Generator,
                 background=None, chunk: int = 1024, threads: int = 1,
                 depths: DepthProvider | None = None) -> RenderBuffers:
    """Full-frame, gradient-free rendering of one view in ray chunks.

    Each chunk draws from its own stream seeded off ``rng``, so the result
    does not depend on ``threads``. Returned buffers hold constants shaped
    (1, H, W, C).
    """
    seed = int(rng.integers(2**63))
    starts = list(range(0, len(bundle), chunk))

    def run(index: int) -> RenderBuffers:
        lo = starts[index]
        idx = np.arange(lo, min(lo + chunk, len(bundle)))
        part = RayBundle(bundle.origins[idx], bundle.directions[idx], bundle.pixels[idx], len(idx), 1)
        with tc.no_grad():
            return render_pixel_batch(field, z, [part], [light], mode, settings,
                                      np.random.default_rng([seed, index]), background, depths)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]

    merged = RenderBuffers(image=Tensor(np.zeros(1)), opacity=Tensor(np.zeros(1)),
                           depth=Tensor(np.zeros(1)), weights=Tensor(np.zeros(1)),
                           depths_t=np.zeros(1), fallbacks=sum(p.fallbacks for p in parts))
    for f in fields(RenderBuffers):
        values = [getattr(p, f.name) for p in parts]
        if isinstance(values[0], Tensor):
            flat = np.concatenate([v.data for v in values], axis=2)
            setattr(merged, f.name, Tensor(flat.reshape((1, bundle.height, bundle.width) + flat.shape[3:])))
        elif isinstance(values[0], np.ndarray):
            flat = np.concatenate(values, axis=2)
            setattr(merged, f.name, flat.reshape((1, bundle.height, bundle.width) + flat.shape[3:]))
    return merged
