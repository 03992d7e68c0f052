"""Adversarial losses, normal consistency, the staged training loop and checkpoints.

One iteration = one critic step then one generator step. Stage 1 trains the
density backbone with the view-dependent color head; stage 2 attaches the
albedo / feature / specular heads and the normal predictor and renders
photometrically with the normal-consistency loss added.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import tensor_core as tc
from discriminator import Discriminator, r1_penalty
from generator import Generator
from renderer import RenderBuffers, RenderSettings, gradient_normal_map, render_pixel_batch
from run_config import RunConfig, get_int_env, load_config, write_resolved
from scene_sampling import generate_rays, random_patch, sample_camera, sample_latent, sample_light
from tensor_core import AdamState, NumericalError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pgan-ckpt-1"
HISTORY_LEN = 1000
CSV_COLUMNS = ("iteration", "stage", "L_G", "L_D", "r1", "L_normal", "normal_angle_deg")
LOG_EVERY = max(1, get_int_env("PGAN_LOG_EVERY", 50))


class NonFiniteLossError(NumericalError):
    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"non-finite {term} ({value})")


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or from an incompatible format."""


# ───────────────────────── losses ─────────────────────────

def log_sigmoid(x) -> Tensor:
    """f(x) = -log(1 + e^-x), stable for large |x|."""
    return -tc.softplus(-tc.as_tensor(x))


def _finite(term: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteLossError(term, float(np.asarray(t.data).reshape(-1)[0]))
    return t


def gan_loss_g(score_fake, form: str = "minimax") -> Tensor:
    """Generator objective on critic scores of generated images.

    ``minimax`` minimizes E[f(D(G))]; ``non_saturating`` minimizes
    E[-f(-D(G))] instead, which keeps gradients alive when the critic wins.
    """
    s = _finite("score_fake", tc.as_tensor(score_fake))
    if form == "minimax":
        return log_sigmoid(s).mean()
    if form == "non_saturating":
        return tc.softplus(s).mean()
    raise ValueError(f"unknown generator loss form {form!r}")


def gan_loss_d(score_fake, score_real, r1, r1_weight: float = 10.0) -> Tensor:
    """-(E[f(D(G))] + E[f(-D(I))]) + r1_weight * R1."""
    fake = _finite("score_fake", tc.as_tensor(score_fake))
    real = _finite("score_real", tc.as_tensor(score_real))
    objective = log_sigmoid(fake).mean() + log_sigmoid(-real).mean()
    return -objective + r1_weight * _finite("r1", tc.as_tensor(r1))


def tv_term(normals) -> Tensor:
    """Mean over pixels of the mean squared difference to each 4-neighbour.

    ``normals`` is (B, h, w, 3) or (h, w, 3). Edge pixels average over the
    neighbours they have; a 1x1 patch gives 0.
    """
    n = tc.as_tensor(normals)
    if n.ndim == 3:
        n = n.reshape((1,) + n.shape)
    b, h, w, _ = n.shape
    if h * w == 1:
        return Tensor(np.zeros(()))
    total: Tensor | None = None
    count = np.zeros((h, w))
    if w > 1:
        d = n[:, :, 1:, :] - n[:, :, :-1, :]
        sq = (d * d).sum(axis=-1)
        pad = Tensor(np.zeros((b, h, 1)))
        total = tc.concat([sq, pad], axis=2) + tc.concat([pad, sq], axis=2)
        count[:, :-1] += 1
        count[:, 1:] += 1
    if h > 1:
        d = n[:, 1:, :, :] - n[:, :-1, :, :]
        sq = (d * d).sum(axis=-1)
        pad = Tensor(np.zeros((b, 1, w)))
        vertical = tc.concat([sq, pad], axis=1) + tc.concat([pad, sq], axis=1)
        total = vertical if total is None else total + vertical
        count[:-1, :] += 1
        count[1:, :] += 1
    assert total is not None
    return (total / Tensor(count)).mean()


def normal_loss(normals, weights, gradients, lambda_tv: float = 0.5) -> Tensor:
    """Per-pixel ||n_uv - sum_j w_j (-grad_j / ||grad_j||)|| averaged, plus lambda_tv * TV(n_uv)."""
    n = tc.as_tensor(normals)
    target = gradient_normal_map(weights, gradients)
    consistency = tc.norm(n - target, axis=-1).mean()
    return consistency + lambda_tv * tv_term(n) if lambda_tv else consistency


def mean_normal_angle(buffers: RenderBuffers, min_opacity: float = 0.5) -> float | None:
    """Mean angle in degrees between n_uv and the rendered density-gradient normal."""
    if buffers.normal is None or buffers.grad_normal is None:
        return None
    g = buffers.grad_normal.data
    mask = (buffers.opacity.data >= min_opacity) & (np.linalg.norm(g, axis=-1) > 1e-12)
    if not mask.any():
        return None
    g = g[mask] / np.linalg.norm(g[mask], axis=-1, keepdims=True)
    cos = np.clip(np.sum(buffers.normal.data[mask] * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


# ───────────────────────── state ─────────────────────────

@dataclass
class TrainState:
    config: RunConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: AdamState
    opt_d: AdamState
    rng: np.random.Generator
    stage: int = 1
    iteration: int = 0
    batch: int = 8
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))

    @property
    def total_iterations(self) -> int:
        t = self.config.train
        return t.iters_stage1 + (0 if is_baseline(self.config) else t.iters_stage2)

    @property
    def finished(self) -> bool:
        return self.iteration >= self.total_iterations


def is_baseline(cfg: RunConfig) -> bool:
    """View-dependent color throughout (pi-GAN style): no photometric stage."""
    return cfg.net.view_dependent in ("on", "off")


def new_state(cfg: RunConfig) -> TrainState:
    tc.set_default_dtype(cfg.train.dtype)
    rng = np.random.default_rng(cfg.train.seed)
    generator = Generator(cfg.net, rng)
    discriminator = Discriminator(cfg.train.patch, cfg.train.d_widths, rng)
    return TrainState(cfg, generator, discriminator, AdamState(lr=cfg.train.lr_g),
                      AdamState(lr=cfg.train.lr_d), rng, batch=cfg.train.batch)


def stage_transition(state: TrainState) -> TrainState:
    """Attach fresh photometric heads, halve the batch and reset optimizer moments."""
    if state.stage != 1:
        raise ValueError(f"stage transition requires stage 1, state is in stage {state.stage}")
    state.generator.reset_photometric_heads(state.rng)
    state.stage = 2
    state.batch = math.ceil(state.batch / 2)
    state.opt_g.reset()
    state.opt_d.reset()
    log.info("Stage 2 from iteration %d, batch %d", state.iteration, state.batch)
    return state


def render_mode(state: TrainState) -> str:
    if state.stage == 2:
        return "photometric"
    return "pi-gan-star" if state.config.net.view_dependent == "off" else "stage1-color"


def render_fake(state: TrainState, batch: int | None = None) -> RenderBuffers:
    """Generated patches under freshly drawn latents, cameras, lights and backgrounds."""
    cfg = state.config
    rng = state.rng
    batch = batch or state.batch
    res, patch = cfg.data.resolution, cfg.train.patch
    z = sample_latent(rng, batch, cfg.net.latent_dim)
    bundles, lights = [], []
    for _ in range(batch):
        pose = sample_camera(rng, cfg.camera)
        lights.append(sample_light(rng, cfg.light))
        top, left = random_patch(rng, res, res, patch)
        bundles.append(generate_rays(pose, res, res, cfg.camera.fov_deg).crop(top, left, patch))
    background = rng.random((batch, 3))
    wants_normals = state.stage == 2 and cfg.net.normal_source == "predicted"
    settings = RenderSettings.from_config(cfg, gradient_normals=wants_normals)
    return render_pixel_batch(state.generator, Tensor(z), bundles, lights, render_mode(state),
                              settings, rng, background)


def sample_real(state: TrainState, images: np.ndarray) -> Tensor:
    """Random records, each cropped to a random training patch."""
    patch = state.config.train.patch
    idx = state.rng.integers(0, len(images), state.batch)
    crops = []
    for i in idx:
        h, w = images[i].shape[:2]
        top, left = random_patch(state.rng, w, h, patch)
        crops.append(images[i, top:top + patch, left:left + patch])
    return Tensor(np.stack(crops))


def generator_loss(state: TrainState, buffers: RenderBuffers, scores: Tensor) -> tuple[Tensor, dict]:
    """L_GAN, plus lambda_n * L_normal in stage 2."""
    cfg = state.config.train
    loss = gan_loss_g(scores, cfg.g_loss)
    parts: dict = {"L_gan": float(loss.data), "L_normal": None}
    if state.stage == 2 and buffers.sample_gradients is not None:
        ln = _finite("L_normal", normal_loss(buffers.normal, buffers.weights, buffers.sample_gradients,
                                             cfg.lambda_tv))
        parts["L_normal"] = float(ln.data)
        if cfg.lambda_n:
            loss = loss + cfg.lambda_n * ln
    return _finite("L_G", loss), parts


def discriminator_step(state: TrainState, real: Tensor) -> dict:
    d_params = state.discriminator.parameters()
    tc.zero_grad(d_params.values())
    with tc.no_grad():
        fake = render_fake(state).image.detach()
    r1 = r1_penalty(state.discriminator, real)
    loss = gan_loss_d(state.discriminator(fake), state.discriminator(real), r1, state.config.train.r1)
    loss.backward()
    tc.adam_step(state.opt_d, d_params)
    tc.zero_grad(d_params.values())
    return {"L_D": float(loss.data), "r1": float(r1.data)}


def generator_step(state: TrainState) -> dict:
    g_params = state.generator.trainable_parameters(state.stage)
    tc.zero_grad(state.generator.parameters().values())
    buffers = render_fake(state)
    loss, parts = generator_loss(state, buffers, state.discriminator(buffers.image))
    loss.backward()
    tc.adam_step(state.opt_g, g_params)
    # the critic accumulated gradients through its scores; they are not used
    tc.zero_grad(state.discriminator.parameters().values())
    tc.zero_grad(state.generator.parameters().values())
    return {"L_G": float(loss.data), "L_normal": parts["L_normal"],
            "normal_angle_deg": mean_normal_angle(buffers)}


def train_step(state: TrainState, real: Tensor) -> dict:
    """One critic update then one generator update; returns the log row."""
    row = {"iteration": state.iteration, "stage": state.stage}
    row |= discriminator_step(state, real)
    row |= generator_step(state)
    state.history.append(row)
    state.iteration += 1
    return row


# ───────────────────────── checkpoints ─────────────────────────

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _adam_arrays(state: AdamState) -> dict[str, np.ndarray]:
    return {f"m/{k}": v for k, v in state.m.items()} | {f"v/{k}": v for k, v in state.v.items()}


def checkpoint_save(state: TrainState, path: Path) -> Path:
    """Write a complete checkpoint directory, replacing ``path`` atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write_resolved(state.config, tmp)
    tc.save_parameters(state.generator.parameters(), tmp / "generator.bin")
    tc.save_parameters(state.discriminator.parameters(), tmp / "discriminator.bin")
    tc.save_arrays(_adam_arrays(state.opt_g), tmp / "adam_g.bin")
    tc.save_arrays(_adam_arrays(state.opt_d), tmp / "adam_d.bin")
    (tmp / "rng.json").write_text(json.dumps(state.rng.bit_generator.state, sort_keys=True) + "\n",
                                  encoding="utf-8")
    (tmp / "history.json").write_text(json.dumps(list(state.history), sort_keys=True) + "\n",
                                      encoding="utf-8")
    lines = [
        f"format {CHECKPOINT_FORMAT}",
        f"stage {state.stage}",
        f"iteration {state.iteration}",
        f"batch {state.batch}",
        f"adam_g_t {state.opt_g.t}",
        f"adam_d_t {state.opt_d.t}",
    ]
    for name in sorted(p.name for p in tmp.iterdir()):
        lines.append(f"sha256 {name} {_sha256(tmp / name)}")
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    tmp.replace(path)
    return path


def _read_manifest(path: Path) -> dict[str, str]:
    manifest = path / "manifest.txt"
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from None
    fields_: dict[str, str] = {}
    for line in lines:
        key, _, value = line.partition(" ")
        if key == "sha256":
            name, _, digest = value.partition(" ")
            fields_[f"sha256:{name}"] = digest
        else:
            fields_[key] = value
    if fields_.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {fields_.get('format')!r}")
    return fields_


def checkpoint_load(path: Path) -> TrainState:
    """Rebuild a TrainState; any corruption raises before a state is returned."""
    path = Path(path)
    meta = _read_manifest(path)
    for key, digest in meta.items():
        if key.startswith("sha256:"):
            name = key.split(":", 1)[1]
            try:
                actual = _sha256(path / name)
            except OSError as exc:
                raise CheckpointError(f"{path}: missing {name} ({exc})") from None
            if actual != digest:
                raise CheckpointError(f"{path}: {name} is corrupt (checksum mismatch)")
    try:
        cfg = load_config(path / "config.conf")
        state = new_state(cfg)
        stage = int(meta["stage"])
        if stage == 2:
            state.stage = 2
        tc.load_parameters(state.generator.parameters(), path / "generator.bin")
        tc.load_parameters(state.discriminator.parameters(), path / "discriminator.bin")
        for opt, name, t in ((state.opt_g, "adam_g.bin", meta["adam_g_t"]),
                             (state.opt_d, "adam_d.bin", meta["adam_d_t"])):
            opt.t = int(t)
            for key, arr in tc.load_arrays(path / name).items():
                kind, pname = key.split("/", 1)
                (opt.m if kind == "m" else opt.v)[pname] = arr
        state.rng.bit_generator.state = json.loads((path / "rng.json").read_text(encoding="utf-8"))
        state.history.extend(json.loads((path / "history.json").read_text(encoding="utf-8")))
        state.iteration = int(meta["iteration"])
        state.batch = int(meta["batch"])
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return state


# ───────────────────────── loop ─────────────────────────

def _csv_value(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _open_log(path: Path, keep_before: int):
    """Loss CSV truncated to rows before ``keep_before`` (resume) and opened for append."""
    rows: list[list[str]] = []
    if path.exists() and keep_before > 0:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) < keep_before]
    fh = path.open("w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return fh, writer


def train(cfg: RunConfig | None, images: np.ndarray, out_dir: Path, resume: Path | None = None) -> TrainState:
    """Run stage 1 then stage 2, writing checkpoints and ``losses.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    state = checkpoint_load(resume) if resume is not None else new_state(cfg)  # type: ignore[arg-type]
    cfg = state.config
    write_resolved(cfg, out_dir)
    ckpt_dir = out_dir / "checkpoints"
    if state.finished:
        log.info("Run at iteration %d of %d is complete", state.iteration, state.total_iterations)
        return state
    if images.shape[1] != cfg.data.resolution:
        raise ValueError(f"dataset resolution {images.shape[1]} != data.resolution {cfg.data.resolution}")

    fh, writer = _open_log(out_dir / "losses.csv", state.iteration)
    try:
        while not state.finished:
            if state.stage == 1 and state.iteration >= cfg.train.iters_stage1:
                checkpoint_save(state, ckpt_dir / "stage1")
                stage_transition(state)
            real = sample_real(state, images)
            try:
                row = train_step(state, real)
            except NumericalError as exc:
                log.exception("Training aborted at iteration %d: %s", state.iteration, exc)
                checkpoint_save(state, out_dir / "aborted")
                raise
            writer.writerow([_csv_value(row.get(c)) for c in CSV_COLUMNS])
            if state.iteration % LOG_EVERY == 0:
                fh.flush()
                log.info("iter %d stage %d L_G %.4f L_D %.4f r1 %.4f", state.iteration, state.stage,
                         row["L_G"], row["L_D"], row["r1"])
            if state.iteration % cfg.train.ckpt_every == 0:
                fh.flush()
                checkpoint_save(state, ckpt_dir / f"iter_{state.iteration:06d}")
                checkpoint_save(state, ckpt_dir / "latest")
    finally:
        fh.close()
    checkpoint_save(state, ckpt_dir / "final")
    checkpoint_save(state, ckpt_dir / "latest")
    log.info("Training complete: %d iterations, stage %d", state.iteration, state.stage)
    return state
