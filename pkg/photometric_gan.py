#!/usr/bin/env python3
"""Command-line entry point: datasets, training, rendering, meshes, metrics, self-checks.

Exit codes: 0 success, 1 failed self-check, 2 usage or config error,
3 I/O or checkpoint error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from collections.abc import Callable
from pathlib import Path

import numpy as np

import data_metrics as dm
import geometry
import tensor_core as tc
from generator import density_gradient
from renderer import RenderBuffers, RenderSettings, composite_weights, render_image
from run_config import ConfigError, MeshConfig, RunConfig, get_int_env, load_config, write_resolved
from scene_sampling import CameraPose, LightCondition, generate_rays
from tensor_core import NumericalError, Tensor
from training import (
    CheckpointError,
    TrainState,
    checkpoint_load,
    generator_loss,
    new_state,
    render_fake,
    render_mode,
    stage_transition,
    train,
)

log = logging.getLogger("photometric_gan")

DEFAULT_THREADS = max(1, get_int_env("PGAN_THREADS", os.cpu_count() or 1))
BUFFER_NAMES = ("final", "albedo", "shading", "specular", "normal", "depth")
CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command-line flags."""
    parser = argparse.ArgumentParser(prog="photometric_gan",
                                     description="Generative radiance field with photometric factorization.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Flat key = value config file.")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Config override (repeatable, wins over --config).")
    common.add_argument("--threads", type=int, default=DEFAULT_THREADS,
                        help="Worker threads (default: PGAN_THREADS or all cores).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="Render a synthetic dataset with ground truth.")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", parents=[common], help="Run stage 1 then stage 2.")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="Checkpoint directory to continue from.")

    p = sub.add_parser("render", parents=[common], help="Render views of one latent code.")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--seed-z", type=int, default=0)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--light", help="ka,kd,x,y,z (default: the configured light mean).")
    p.add_argument("--res", type=int)
    p.add_argument("--buffers", action="store_true", help="Also write albedo/shading/specular/normal/depth.")
    p.add_argument("--grad-normal", action="store_true", help="Also write the density-gradient normal map.")
    p.add_argument("--light-sweep", type=int, default=0, metavar="K",
                   help="Render K lights sweeping x from -0.8 to 0.8 for the first view.")
    p.add_argument("--out", type=Path, default=Path("renders"))

    p = sub.add_parser("extract-mesh", parents=[common], help="Marching-cubes mesh of one latent code.")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--seed-z", type=int, default=0)
    p.add_argument("--res", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--threshold", type=float)
    group.add_argument("--sweep", action="store_true", help="Write a threshold sweep CSV instead of a mesh.")
    p.add_argument("--format", choices=("obj", "ply"), default="obj")
    p.add_argument("--no-normals", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("relight-mesh", parents=[common], help="Ray-cast preview of a textured mesh.")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--light", default="0.3,0.7,0,0,-1")
    p.add_argument("--camera", default="0,0", help="pitch,yaw in radians.")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--specular", default="0,0", help="s0,s1 for the whole mesh.")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="SIDE or pixel-Frechet against a dataset.")
    p.add_argument("--ckpt", type=Path, help="Omit to score the dataset against itself.")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--metric", choices=("side", "pfd"), required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed-z", type=int, default=0)
    p.add_argument("--out", type=Path, help="Also append the report line to this file.")

    p = sub.add_parser("selfcheck", parents=[common], help="Gradient checks and invariant oracles.")
    p.add_argument("--only", action="append", default=[], help="Run only the named check(s).")
    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, args.set)


# ───────────────────────── shared helpers ─────────────────────────

def latent(state: TrainState, seed: int, index: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed if index is None else [seed, index])
    return rng.standard_normal((1, state.config.net.latent_dim))


def view_poses(cfg: RunConfig, k: int) -> list[CameraPose]:
    """k yaws spread across the configured pose range; one view is frontal."""
    if k < 1:
        raise ValueError(f"--views must be >= 1, got {k}")
    if k == 1:
        return [CameraPose(0.0, 0.0, cfg.camera.radius)]
    lo, hi = cfg.camera.range_h if cfg.camera.dist == "uniform" else (-2 * cfg.camera.sigma_h, 2 * cfg.camera.sigma_h)
    return [CameraPose(0.0, float(y), cfg.camera.radius) for y in np.linspace(lo, hi, k)]


def default_light(cfg: RunConfig) -> LightCondition:
    lc = cfg.light
    return LightCondition.from_xy(0.5 * (lc.ka_min + lc.ka_max), 0.5 * (lc.kd_min + lc.kd_max), lc.mu_x, lc.mu_y)


def render_view(state: TrainState, z: np.ndarray, pose: CameraPose, light: LightCondition, res: int,
                threads: int, seed: int, gradient_normals: bool = False) -> RenderBuffers:
    cfg = state.config
    settings = RenderSettings.from_config(cfg, gradient_normals=gradient_normals and state.stage == 2)
    bundle = generate_rays(pose, res, res, cfg.camera.fov_deg)
    return render_image(state.generator, Tensor(z), bundle, light, render_mode(state), settings,
                        np.random.default_rng(seed), np.asarray(cfg.render.background), cfg.render.chunk, threads)


def _unit_to_rgb(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 1e-12, (v / np.maximum(n, 1e-12) + 1.0) * 0.5, 0.5)


def buffer_images(buffers: RenderBuffers, settings: RenderSettings) -> dict[str, np.ndarray]:
    """8-bit-ready (H, W, 3) images for whichever buffers the render produced."""
    out = {"final": buffers.image.data[0]}
    depth = buffers.depth.data[0]
    scaled = (settings.far - depth) / (settings.far - settings.near)
    out["depth"] = np.repeat(np.clip(scaled, 0.0, 1.0)[..., None], 3, axis=-1)
    if buffers.albedo is not None:
        out["albedo"] = buffers.albedo.data[0]
    if buffers.shading is not None:
        out["shading"] = np.repeat(0.5 * buffers.shading.data[0], 3, axis=-1)
    if buffers.specular_map is not None:
        out["specular"] = np.repeat(buffers.specular_map.data[0], 3, axis=-1)
    if buffers.normal is not None:
        out["normal"] = _unit_to_rgb(buffers.normal.data[0])
    if buffers.grad_normal is not None:
        out["grad_normal"] = _unit_to_rgb(buffers.grad_normal.data[0])
    return out


# ───────────────────────── commands ─────────────────────────

def cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    path = dm.make_dataset(cfg, args.out, args.n, args.seed, args.threads)
    write_resolved(cfg, args.out)
    print(f"Wrote {args.n or cfg.data.count} records: {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = None if args.resume else resolve_config(args)
    if args.resume and (args.config or args.set):
        log.warning("--resume uses the checkpoint's config; --config/--set ignored")
    dataset = dm.load_dataset(args.data)
    state = train(cfg, dataset.images, args.out, args.resume)
    print(f"complete: {state.iteration} iterations, stage {state.stage}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    state = checkpoint_load(args.ckpt)
    cfg = state.config
    res = args.res or cfg.render.resolution
    light = LightCondition.parse(args.light) if args.light else default_light(cfg)
    z = latent(state, args.seed_z)
    settings = RenderSettings.from_config(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    written = 0
    for v, pose in enumerate(view_poses(cfg, args.views)):
        buffers = render_view(state, z, pose, light, res, args.threads, args.seed_z, args.grad_normal)
        images = buffer_images(buffers, settings)
        names = BUFFER_NAMES if args.buffers else ("final",)
        if args.grad_normal:
            names += ("grad_normal",)
        for name in names:
            if name not in images:
                log.warning("%s buffer unavailable in stage %d render", name, state.stage)
                continue
            dm.write_png(images[name], args.out / f"view{v:02d}_{name}.png")
            written += 1
        if buffers.fallbacks:
            log.warning("view %d: %d normal fallback pixel(s)", v, buffers.fallbacks)
    if args.light_sweep:
        pose = view_poses(cfg, args.views)[0]
        y = float(light.direction[1] / -light.direction[2]) if light.direction[2] else 0.0
        for j, x in enumerate(np.linspace(-0.8, 0.8, args.light_sweep)):
            swept = LightCondition.from_xy(light.ka, light.kd, float(x), y)
            buffers = render_view(state, z, pose, swept, res, args.threads, args.seed_z)
            dm.write_png(buffers.image.data[0], args.out / f"sweep{j:02d}.png")
            written += 1
    print(f"Wrote {written} image(s) to {args.out}")
    return 0


def cmd_extract_mesh(args: argparse.Namespace) -> int:
    state = checkpoint_load(args.ckpt)
    cfg = state.config
    z = latent(state, args.seed_z)
    grid = geometry.eval_density_grid(state.generator, z, args.res or cfg.mesh.resolution, cfg.mesh.bound,
                                      threads=args.threads)
    if args.sweep:
        rows = geometry.threshold_sweep(grid, cfg.mesh.sweep)
        geometry.write_sweep_csv(rows, args.out)
        print(f"Wrote {len(rows)} sweep rows to {args.out}")
        return 0
    threshold = cfg.mesh.threshold if args.threshold is None else args.threshold
    mesh = geometry.marching_cubes(grid, threshold)
    if mesh.is_empty:
        log.warning("empty mesh at threshold %g (grid range %.4g..%.4g)", threshold,
                    grid.values.min(), grid.values.max())
    else:
        mesh = geometry.texture_mesh(mesh, state.generator, z, normals=not args.no_normals,
                                     fd_step=cfg.net.fd_step)
    path = geometry.export_mesh(mesh, args.out, args.format)
    print(f"Wrote mesh ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces) to {path}")
    return 0


def cmd_relight_mesh(args: argparse.Namespace) -> int:
    mesh = geometry.load_mesh(args.mesh)
    fov = 30.0
    if args.config or args.set:
        fov = resolve_config(args).camera.fov_deg
    s0, s1 = (float(v) for v in args.specular.split(","))
    image = geometry.relight_preview(mesh, CameraPose.parse(args.camera), LightCondition.parse(args.light),
                                     args.res, args.res, fov_deg=fov, specular=(s0, s1), threads=args.threads)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dm.write_png(image, args.out)
    print(f"Wrote {args.out}")
    return 0


def format_report(metric: str, n: int, value: float) -> str:
    if metric == "side":
        return f"metric=side n={n} side_x100={100.0 * value:.6f}"
    return f"metric=pfd n={n} value={value:.6f}"


def _nearest_record(image: np.ndarray, dataset: dm.Dataset) -> int:
    return int(np.argmin(((dataset.images - image) ** 2).reshape(len(dataset), -1).sum(axis=1)))


def evaluate(args: argparse.Namespace) -> tuple[int, float]:
    dataset = dm.load_dataset(args.data, args.n)
    n = len(dataset)
    if args.ckpt is None:
        if args.metric == "pfd":
            return n, dm.pixel_frechet(dataset.images, dataset.images)
        scores = []
        for i in range(n):
            depth, mask = dataset.ground_truth(i, "depth"), dataset.ground_truth(i, "mask") > 0.5
            if mask.any():
                scores.append(dm.side(depth, depth, mask))
        return n, float(np.mean(scores))

    state = checkpoint_load(args.ckpt)
    res = dataset.images.shape[1]
    generated: list[RenderBuffers] = []
    for i, record in enumerate(dataset.manifest["records"][:n]):
        ka, kd, *direction = record["light"]
        light = LightCondition(ka, kd, np.asarray(direction))
        generated.append(render_view(state, latent(state, args.seed_z, i), dataset.camera(i), light, res,
                                     args.threads, args.seed_z + i))
    if args.metric == "pfd":
        return n, dm.pixel_frechet(np.stack([b.image.data[0] for b in generated]), dataset.images)
    scores = []
    for buffers in generated:
        image = buffers.image.data[0]
        j = _nearest_record(image, dataset)
        mask = (buffers.opacity.data[0] >= 0.5) & (dataset.ground_truth(j, "mask") > 0.5)
        if mask.any():
            scores.append(dm.side(buffers.depth.data[0], dataset.ground_truth(j, "depth"), mask))
    if not scores:
        raise ValueError("no generated view overlaps a ground-truth object mask")
    return n, float(np.mean(scores))


def cmd_eval(args: argparse.Namespace) -> int:
    n, value = evaluate(args)
    line = format_report(args.metric, n, value)
    print(line)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    return 0


# ───────────────────────── self-checks ─────────────────────────

class SelfCheckFailure(AssertionError):
    pass


def _expect(ok: bool, detail: str) -> None:
    if not ok:
        raise SelfCheckFailure(detail)


def micro_config() -> RunConfig:
    return load_config(CONFIG_DIR / "micro.conf")


def check_gradients() -> None:
    """Full stage-2 generator loss against central differences on the micro network."""
    state = stage_transition(new_state(micro_config()))

    def loss() -> Tensor:
        state.rng = np.random.default_rng(7)
        buffers = render_fake(state)
        value, _ = generator_loss(state, buffers, state.discriminator(buffers.image))
        return value

    params = list(state.generator.trainable_parameters(2).values())
    err = tc.gradcheck(loss, params, h=1e-6, max_entries=3)
    tc.zero_grad(state.discriminator.parameters().values())
    _expect(err < 1e-3, f"max relative error {err:.3g}")


def check_volume_weights() -> None:
    rng = np.random.default_rng(1)
    sigma = rng.uniform(0.0, 30.0, (1000, 12))
    deltas = rng.uniform(0.001, 0.05, (1000, 12))
    alpha, _, w = composite_weights(sigma, deltas)
    total = w.data.sum(axis=-1)
    expected = 1.0 - np.prod(1.0 - alpha.data, axis=-1)
    _expect(np.abs(total - expected).max() < 1e-9, "sum of weights != 1 - prod(1 - alpha)")
    _expect(bool(np.all(w.data >= 0)), "negative weight")
    front = composite_weights(np.array([[20.0, 5.0, 5.0]]), np.array([[1.0, 0.1, 0.1]]))[2].data
    _expect(front[0, 0] >= 1 - 1e-6, f"opaque front weight {front[0, 0]}")


def check_photometric_oracle() -> None:
    rng = np.random.default_rng(2)
    scene = dm.SyntheticScene(radius=0.4, albedo=np.array([0.8, 0.6, 0.4]), specular=(0.3, 0.5))
    for _ in range(5):
        pose = CameraPose(float(rng.normal(0, 0.15)), float(rng.normal(0, 0.3)))
        light = LightCondition.from_xy(float(rng.uniform(0.2, 0.6)), float(rng.uniform(0.3, 0.9)),
                                       float(rng.normal(0, 0.3)), float(rng.normal(0.3, 0.1)))
        err = dm.shell_oracle_error(scene, pose, light, 64)
        _expect(err < 1e-6, f"rendered image differs from closed form by {err:.3g}")


def check_density_normals() -> None:
    field = dm.AnalyticField(kind="blob")
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(1000, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    points = dirs * rng.uniform(0.2, 0.5, (1000, 1))
    grad = density_gradient(lambda p: field.density(p), Tensor(points[None]), 1e-4).data[0]
    n = -grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    _expect(np.abs(n - dirs).max() < 1e-5, f"normal error {np.abs(n - dirs).max():.3g}")
    exact = -points / 0.25 ** 2 * field.density(Tensor(points[None])).data[0]
    errs = [np.abs(density_gradient(lambda p: field.density(p), Tensor(points[None]), h).data[0] - exact).max()
            for h in (1e-2, 5e-3)]
    ratio = errs[0] / errs[1]
    _expect(3.5 <= ratio <= 4.5, f"error ratio {ratio:.3f} when h halves")


def check_marching_cubes() -> None:
    field = dm.AnalyticField(kind="smooth-sphere", peak=100.0, width=0.02)
    grid = geometry.DensityGrid.cube(field.density_values(geometry.lattice_points(64, 0.8)), 0.8)
    mesh = geometry.marching_cubes(grid, 50.0)
    radii = np.linalg.norm(mesh.vertices, axis=-1)
    voxel = 1.6 / 63
    _expect(bool(np.all(np.abs(radii - 0.5) <= 1.5 * voxel)), "vertex off the sphere")
    edges = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    _expect(bool(np.all(counts == 2)), "mesh is not watertight")
    vertices = [row[1] for row in geometry.threshold_sweep(grid, MeshConfig().sweep)]
    _expect(all(a >= b for a, b in zip(vertices, vertices[1:])), f"vertex counts grow over the sweep: {vertices}")


def check_side() -> None:
    rng = np.random.default_rng(4)
    d = rng.uniform(0.5, 2.0, (8, 8))
    mask = np.ones_like(d, dtype=bool)
    _expect(dm.side(d, d, mask) < 1e-10, "side(d, d) != 0")
    for c in (0.5, 2.0, 10.0):
        _expect(dm.side(c * d, d, mask) < 1e-10, f"side not scale invariant at c={c}")
    two = dm.side(np.array([1.0, 2.0]), np.ones(2), np.ones(2, dtype=bool))
    _expect(abs(two - math.log(2) / 2) < 1e-6, f"two-pixel case {two}")


def check_dent() -> None:
    intact = dm.SyntheticScene(radius=0.5)
    dented = dm.SyntheticScene(shape="dented", radius=0.5, dent_width=0.3, dent_depth=0.1)
    report = dm.dent_experiment(intact, dented, (dm.oblique_light(0.0), dm.oblique_light(80.0)), size=64)
    _expect(report.ratio < 0.2, f"frontal/oblique ratio {report.ratio:.3f}")


def check_stage_transition() -> None:
    state = new_state(micro_config())
    rng = np.random.default_rng(5)
    z = Tensor(rng.standard_normal((4, state.config.net.latent_dim)))
    x = Tensor(rng.uniform(-0.5, 0.5, (4, 25, 3)))
    with tc.no_grad():
        before = state.generator.density(x, state.generator.map_latent(z)).data.copy()
        batch = state.batch
        stage_transition(state)
        after = state.generator.density(x, state.generator.map_latent(z)).data
    _expect(np.array_equal(before, after), "density changed across the stage transition")
    _expect(state.batch == math.ceil(batch / 2), f"batch {batch} -> {state.batch}")


SELF_CHECKS: dict[str, Callable[[], None]] = {
    "volume-weights": check_volume_weights,
    "photometric-oracle": check_photometric_oracle,
    "density-normals": check_density_normals,
    "marching-cubes": check_marching_cubes,
    "side-metric": check_side,
    "dent-ambiguity": check_dent,
    "stage-transition": check_stage_transition,
    "gradients": check_gradients,
}


def run_selfchecks(names: list[str] | None = None) -> list[str]:
    """Run checks in float64; returns the names that failed."""
    unknown = sorted(set(names or []) - set(SELF_CHECKS))
    if unknown:
        raise ValueError(f"unknown self-check(s): {', '.join(unknown)}")
    failed = []
    with tc.default_dtype("float64"):
        for name, check in SELF_CHECKS.items():
            if names and name not in names:
                continue
            start = time.perf_counter()
            try:
                check()
            except SelfCheckFailure as exc:
                failed.append(name)
                print(f"FAIL {name}: {exc}")
                continue
            print(f"ok   {name} ({time.perf_counter() - start:.1f}s)")
    return failed


def cmd_selfcheck(args: argparse.Namespace) -> int:
    failed = run_selfchecks(args.only)
    if failed:
        print(f"{len(failed)} self-check(s) failed: {', '.join(failed)}")
        return 1
    print("all self-checks passed")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "relight-mesh": cmd_relight_mesh,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        logging.exception("Numerical failure: %s", exc)
        return 4
    except (CheckpointError, OSError) as exc:
        logging.error("I/O failure: %s", exc)
        return 3
    except (ConfigError, ValueError) as exc:
        logging.error("Invalid input: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
