"""Dataset profiles: camera-pose and light distributions per training corpus.

A profile only seeds config defaults; every value can still be overridden by a
config key. The registry is the single source of profile identity, the same
way the run config refers to it by name (``profile = celeba``).
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Profile:
    id: str
    camera_dist: str                      # "gaussian" | "uniform"
    sigma_v: float = 0.0                  # pitch std (gaussian)
    sigma_h: float = 0.0                  # yaw std (gaussian)
    range_v: tuple[float, float] = (0.0, 0.0)
    range_h: tuple[float, float] = (0.0, 0.0)
    fov_deg: float = 12.0
    ray_bounds: tuple[float, float] = (0.88, 1.12)
    light_mu: tuple[float, float] = (0.0, 0.39)
    light_sigma: tuple[float, float] = (0.27, 0.07)
    specular: bool = True

    def config_keys(self) -> dict[str, str]:
        """Flat config keys this profile sets (strings, as a config file would)."""
        return {
            "camera.dist": self.camera_dist,
            "camera.sigma_v": repr(self.sigma_v),
            "camera.sigma_h": repr(self.sigma_h),
            "camera.range_v": f"{self.range_v[0]!r},{self.range_v[1]!r}",
            "camera.range_h": f"{self.range_h[0]!r},{self.range_h[1]!r}",
            "camera.fov_deg": repr(self.fov_deg),
            "ray.near": repr(self.ray_bounds[0]),
            "ray.far": repr(self.ray_bounds[1]),
            "light.mu_x": repr(self.light_mu[0]),
            "light.mu_y": repr(self.light_mu[1]),
            "light.sigma_x": repr(self.light_sigma[0]),
            "light.sigma_y": repr(self.light_sigma[1]),
            "net.specular": "on" if self.specular else "off",
        }


PROFILES = {
    p.id: p
    for p in (
        Profile("celeba", "gaussian", sigma_v=0.15, sigma_h=0.3),
        Profile("cats", "uniform", range_v=(-0.5, 0.5), range_h=(-0.4, 0.4)),
        Profile("bfm", "gaussian", sigma_v=0.15, sigma_h=0.3,
                light_mu=(0.0, 0.0), light_sigma=(0.35, 0.15), specular=False),
        # synthetic desk corpus: wider lens and a ray shell deep enough for a whole ball
        Profile("blob", "gaussian", sigma_v=0.15, sigma_h=0.3, fov_deg=30.0, ray_bounds=(0.5, 1.5)),
    )
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {', '.join(PROFILES)}") from None
