"""Conditioned implicit field: mapping MLP -> FiLMed SIREN backbone -> per-point heads.

Shapes: points are (B, P, 3) for B latent codes and P points each; every head
output keeps that (B, P, C) layout. The per-pixel normal predictor runs on
volume-rendered features, so it takes (..., 4).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from collections.abc import Callable

import numpy as np

import tensor_core as tc
from run_config import NetConfig
from tensor_core import Tensor

log = logging.getLogger(__name__)

OMEGA_0 = 30.0
GAMMA_SCALE = 15.0
MAPPING_SLOPE = 0.2
NORMAL_FALLBACK = np.array([0.0, 0.0, 1.0])
NORMAL_EPS = 1e-12


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @classmethod
    def create(cls, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
               bound: float | None = None, std: float | None = None, bias_bound: float = 0.0) -> Linear:
        if std is not None:
            w = rng.normal(0.0, std, (fan_in, fan_out))
        else:
            b = bound if bound is not None else math.sqrt(1.0 / fan_in)
            w = rng.uniform(-b, b, (fan_in, fan_out))
        bias = rng.uniform(-bias_bound, bias_bound, fan_out) if bias_bound else np.zeros(fan_out)
        return cls(tc.parameter(w, f"{name}.weight"), tc.parameter(bias, f"{name}.bias"))

    def parameters(self, name: str) -> dict[str, Tensor]:
        return {f"{name}.weight": self.weight, f"{name}.bias": self.bias}


def siren_bound(fan_in: int, first: bool = False) -> float:
    return 1.0 / fan_in if first else math.sqrt(6.0 / fan_in) / OMEGA_0


@dataclass
class MappingOutput:
    """FiLM frequencies and phases, each (B, L, H)."""

    gammas: Tensor
    betas: Tensor

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        b, _, h = self.gammas.shape
        return (self.gammas[:, i:i + 1, :].reshape(b, 1, h),
                self.betas[:, i:i + 1, :].reshape(b, 1, h))


@dataclass
class FactorizedSample:
    sigma: Tensor                # (B, P, 1) >= 0
    albedo: Tensor | None        # (B, P, 3) in (0, 1)
    feature: Tensor | None       # (B, P, 4) in (0, 1)
    specular: Tensor | None      # (B, P, 2) >= 0, absent in no-specular mode
    hidden: Tensor | None = None
    color: Tensor | None = None  # stage-1 view-dependent color


def density_gradient(sigma_fn: Callable[[Tensor], Tensor], points: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a density field at (B, P, 3) points.

    The six shifted evaluations go through ``sigma_fn`` on the graph, so
    parameter gradients flow through the stencil.
    """
    points = tc.as_tensor(points)
    if points.ndim != 3 or points.shape[-1] != 3:
        raise tc.ShapeError("density_gradient", points.shape, detail="expected (B, P, 3)")
    b, p, _ = points.shape
    offsets = np.concatenate([np.eye(3), -np.eye(3)]) * h
    shifted = points.reshape(b, 1, p, 3) + Tensor(offsets.reshape(1, 6, 1, 3))
    sigma = sigma_fn(shifted.reshape(b, 6 * p, 3)).reshape(b, 6, p)
    plus, minus = sigma[:, 0:3, :], sigma[:, 3:6, :]
    return tc.transpose((plus - minus) * (1.0 / (2.0 * h)), (0, 2, 1))


def unit_normals(vectors: Tensor, floor: float = 1e-8) -> Tensor:
    """v / max(||v||, floor) along the last axis."""
    n = tc.maximum(tc.norm(vectors, axis=-1, keepdims=True), floor)
    return vectors / n


class Generator:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.normal_fallbacks = 0
        hdim, m = cfg.hidden_dim, cfg.mapping_dim
        self.mapping: list[Linear] = []
        fan_in = cfg.latent_dim
        kaiming = math.sqrt(2.0 / (1.0 + MAPPING_SLOPE ** 2))
        for i in range(cfg.mapping_layers):
            self.mapping.append(Linear.create(f"mapping.{i}", fan_in, m, rng, std=kaiming / math.sqrt(fan_in)))
            fan_in = m
        out = Linear.create(f"mapping.{cfg.mapping_layers}", fan_in, 2 * cfg.layers * hdim, rng,
                            std=0.25 * kaiming / math.sqrt(fan_in))
        half = cfg.layers * hdim
        out.weight.data[:, :half] *= GAMMA_SCALE
        out.bias.data[:half] = OMEGA_0
        self.mapping.append(out)

        self.backbone = [Linear.create("backbone.0", 3, hdim, rng, siren_bound(3, first=True),
                                       bias_bound=1.0 / math.sqrt(3))]
        for i in range(1, cfg.layers):
            self.backbone.append(Linear.create(f"backbone.{i}", hdim, hdim, rng, siren_bound(hdim),
                                               bias_bound=1.0 / math.sqrt(hdim)))

        self.sigma_head = Linear.create("sigma", hdim, 1, rng, siren_bound(hdim))
        self.color_film = Linear.create("color.0", hdim + 3, hdim, rng, siren_bound(hdim + 3))
        self.color_out = Linear.create("color.1", hdim, 3, rng, siren_bound(hdim))
        self.reset_photometric_heads(rng)

    def reset_photometric_heads(self, rng: np.random.Generator) -> None:
        """Fresh a/f/s heads and normal predictor (attached at the stage transition)."""
        hdim = self.cfg.hidden_dim
        self.albedo_head = Linear.create("albedo", hdim, 3, rng, siren_bound(hdim))
        self.feature_head = Linear.create("feature", hdim, 4, rng, siren_bound(hdim))
        self.specular_head = (Linear.create("specular", hdim, 2, rng, siren_bound(hdim))
                              if self.cfg.specular == "on" else None)
        k = self.cfg.normal_hidden
        kaiming = math.sqrt(2.0 / (1.0 + MAPPING_SLOPE ** 2))
        self.normal_hidden = Linear.create("normal.0", 4, k, rng, std=kaiming / 2.0)
        self.normal_out = Linear.create("normal.1", k, 3, rng, bound=math.sqrt(6.0 / k))

    # ---- parameters ----
    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.mapping):
            params |= layer.parameters(f"mapping.{i}")
        for i, layer in enumerate(self.backbone):
            params |= layer.parameters(f"backbone.{i}")
        params |= self.sigma_head.parameters("sigma")
        params |= self.color_film.parameters("color.0") | self.color_out.parameters("color.1")
        params |= self.albedo_head.parameters("albedo") | self.feature_head.parameters("feature")
        if self.specular_head is not None:
            params |= self.specular_head.parameters("specular")
        params |= self.normal_hidden.parameters("normal.0") | self.normal_out.parameters("normal.1")
        return params

    def trainable_parameters(self, stage: int) -> dict[str, Tensor]:
        """Parameter partition for one stage; the stage-1 color head is frozen afterwards."""
        params = self.parameters()
        if stage == 1:
            keep = ("mapping.", "backbone.", "sigma.", "color.")
        else:
            keep = ("mapping.", "backbone.", "sigma.", "albedo.", "specular.")
            if self.cfg.normal_source == "predicted":
                keep += ("feature.", "normal.")
        return {name: p for name, p in params.items() if name.startswith(keep)}

    # ---- forward ----
    def mapping_forward(self, z, capture: list[np.ndarray] | None = None) -> MappingOutput:
        z = tc.as_tensor(z)
        if z.ndim != 2 or z.shape[-1] != self.cfg.latent_dim:
            raise tc.ShapeError("mapping_forward", z.shape, (self.cfg.latent_dim,),
                                detail="latent length mismatch")
        x = z
        for layer in self.mapping[:-1]:
            pre = layer(x)
            if capture is not None:
                capture.append(pre.data.copy())
            x = tc.leaky_relu(pre, MAPPING_SLOPE)
        out = self.mapping[-1](x)
        b, lh = z.shape[0], self.cfg.layers * self.cfg.hidden_dim
        shape = (b, self.cfg.layers, self.cfg.hidden_dim)
        return MappingOutput(out[:, :lh].reshape(shape), out[:, lh:].reshape(shape))

    # alias used by the renderer's field protocol
    map_latent = mapping_forward

    def backbone_forward(self, points, m: MappingOutput) -> Tensor:
        x = tc.as_tensor(points)
        for i, layer in enumerate(self.backbone):
            gamma, beta = m.layer(i)
            x = tc.sin(gamma * layer(x) + beta)
        return x

    def heads_forward(self, h: Tensor) -> FactorizedSample:
        return FactorizedSample(
            sigma=tc.relu(self.sigma_head(h)),
            albedo=tc.sigmoid(self.albedo_head(h)),
            feature=tc.sigmoid(self.feature_head(h)),
            specular=tc.relu(self.specular_head(h)) if self.specular_head is not None else None,
            hidden=h,
        )

    def stage1_color(self, h: Tensor, view_dirs, zero_view: bool = False) -> Tensor:
        d = tc.as_tensor(view_dirs)
        if zero_view or self.cfg.view_dependent == "off":
            d = Tensor(np.zeros(d.shape))
        d = tc.broadcast_to(d, h.shape[:-1] + (3,))
        return tc.sigmoid(self.color_out(tc.sin(self.color_film(tc.concat([h, d], axis=-1)))))

    def query(self, points, m: MappingOutput, view_dirs=None, *, color: bool = False,
              zero_view: bool = False) -> FactorizedSample:
        h = self.backbone_forward(points, m)
        if color:
            sample = FactorizedSample(sigma=tc.relu(self.sigma_head(h)), albedo=None, feature=None,
                                      specular=None, hidden=h)
            sample.color = self.stage1_color(h, view_dirs, zero_view)
            return sample
        return self.heads_forward(h)

    def density(self, points, m: MappingOutput) -> Tensor:
        return tc.relu(self.sigma_head(self.backbone_forward(points, m)))

    def density_gradient(self, points, m: MappingOutput, h: float | None = None) -> Tensor:
        return density_gradient(lambda p: self.density(p, m), points, self.cfg.fd_step if h is None else h)

    def normal_predict(self, features) -> tuple[Tensor, int]:
        """Unit normals from rendered features, plus the number of fallback pixels."""
        f = tc.as_tensor(features)
        if f.shape[-1] != 4:
            raise tc.ShapeError("normal_predict", f.shape, detail="expected 4 feature channels")
        v = tc.tanh(self.normal_out(tc.leaky_relu(self.normal_hidden(f), MAPPING_SLOPE)))
        return normalize_with_fallback(v, self)

    predict_normals = normal_predict


def normalize_with_fallback(v: Tensor, owner=None) -> tuple[Tensor, int]:
    """Normalize; vectors shorter than NORMAL_EPS become NORMAL_FALLBACK."""
    n = np.linalg.norm(v.data, axis=-1, keepdims=True)
    bad = n < NORMAL_EPS
    count = int(bad.sum())
    safe = tc.maximum(tc.norm(v, axis=-1, keepdims=True), NORMAL_EPS)
    unit = v / safe
    if count:
        keep = Tensor((~bad).astype(np.float64))
        unit = unit * keep + Tensor(bad * NORMAL_FALLBACK)
        if owner is not None:
            owner.normal_fallbacks += count
        log.warning("normal prediction fell back to %s on %d pixel(s)", NORMAL_FALLBACK.tolist(), count)
    return unit, count
