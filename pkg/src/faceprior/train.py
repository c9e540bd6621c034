"""Training loop for the one-step restorer in either regime, with checkpointing."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig, config_from_mapping
from .degrade import degrade, example_rng
from .encoder import Projection, load_backend
from .imageio import load_dir, to_tensor
from .losses import (
    MSEPerceptual,
    PatchDiscriminator,
    ToyIdentity,
    ToyPerceptual,
    gan_standard,
    identity_loss,
    perceptual_loss,
    perceptual_loss_sd,
    ragan_discriminator_loss,
    ragan_generator_loss,
    reconstruction_loss,
    total_loss_qwen,
    total_loss_sd,
)
from .onestep import ConditionPath, NoiseSchedule, Regime, ToyGenerator, make_codec, one_step, restore

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "faceprior-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, terms: dict):
        self.terms = terms
        detail = ", ".join(f"{k}={v}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class PlainRestorer(nn.Module):
    """Fusion-free residual CNN used as the frozen intermediate restorer."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, x):
        return (x + self.body(x)).clamp(0.0, 1.0)


def step_seed(seed: int, step: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(step), salt]).generate_state(1, dtype=np.uint64)[0] >> 1)


def degrade_batch(hq: torch.Tensor, config: TrainConfig, step: int, example_ids: Iterable[int], salt: int = 0) -> torch.Tensor:
    """Degrade each image with a recipe drawn from its own (seed, step, example) stream."""
    out = []
    for img, idx in zip(hq, example_ids):
        rng = example_rng(config.seed, idx, step, salt)
        recipe = config.recipe.sample(rng)
        arr = img.detach().double().numpy().transpose(1, 2, 0)
        out.append(degrade(arr, recipe, double_pass=config.recipe.double_pass))
    return to_tensor(out, hq.dtype)


@dataclass
class TrainState:
    config: TrainConfig
    schedule: NoiseSchedule
    encoder: nn.Module
    condition: ConditionPath
    projection: Projection
    generator: ToyGenerator
    discriminator: PatchDiscriminator
    codec: nn.Module
    restorer: nn.Module
    perceptual: nn.Module
    identity: nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0

    def generator_modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "condition": self.condition,
            "projection": self.projection,
            "generator": self.generator,
            "codec": self.codec,
        }

    def intermediate(self, lq: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.restorer(lq)

    def restore(self, lq: torch.Tensor, seed: int = 0) -> torch.Tensor:
        return restore(lq, self.intermediate, self.encoder, self.condition, self.generator, self.codec,
                       self.schedule, projection=self.projection, seed=seed)


def build_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    regime = Regime(config.regime)
    schedule = NoiseSchedule.default(regime, config.fixed_T)
    encoder = load_backend(config.encoder, patch_size=config.patch_size, dim=config.encoder_dim,
                           depth=config.encoder_depth, native_size=config.image_size) if config.encoder == "toy" \
        else load_backend(config.encoder)
    grid = encoder.native_size // encoder.patch_size
    condition = ConditionPath(encoder.dim, grid * grid, config.condition_mode, config.streams,
                              eps=config.gate_eps, pool=config.pool)
    projection = Projection(encoder.dim, config.cond_dim)
    codec = make_codec(config.codec)
    aux = codec.latent_channels if regime is Regime.RECTIFIED_FLOW else 0
    generator = ToyGenerator(codec.latent_channels, config.cond_dim, config.gen_width, aux_channels=aux,
                             f_embedding=config.f_embedding)
    generator.init_passthrough(schedule)
    disc = PatchDiscriminator(codec.latent_channels, config.disc_width,
                              cond_dim=encoder.dim if config.disc_conditioned else None)
    restorer = PlainRestorer() if config.restorer == "stage0" else nn.Identity()
    restorer.requires_grad_(False)
    perceptual = ToyPerceptual() if config.perceptual == "toy" else MSEPerceptual()
    identity = ToyIdentity()

    g_params = []
    for name, mod in (("encoder", encoder), ("condition", condition), ("projection", projection),
                      ("generator", generator), ("codec", codec)):
        if name == "encoder" and not config.train_encoder:
            mod.requires_grad_(False)
            continue
        g_params += [p for p in mod.parameters() if p.requires_grad]
    betas = (0.9, 0.999)
    opt_g = torch.optim.AdamW(g_params, lr=config.lr_generator, betas=betas, weight_decay=config.weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=config.lr_discriminator, betas=betas, weight_decay=config.weight_decay)
    return TrainState(config, schedule, encoder, condition, projection, generator, disc, codec, restorer,
                      perceptual, identity, opt_g, opt_d)


def pretrain_restorer(state: TrainState, images: torch.Tensor) -> list[float]:
    """Stage 0: fit the plain restorer with MSE on degraded copies of ``images``, then freeze it."""
    cfg = state.config
    if cfg.restorer != "stage0" or cfg.restorer_steps <= 0:
        return []
    model = state.restorer
    model.requires_grad_(True)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3, weight_decay=0.0)
    history = []
    n = images.shape[0]
    for s in range(cfg.restorer_steps):
        ids = np.random.default_rng([cfg.seed, s, 7]).permutation(n)[: min(n, cfg.batch_size)]
        hq = images[ids]
        lq = degrade_batch(hq, cfg, s, ids, salt=1)
        loss = F.mse_loss(model(lq), hq)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.requires_grad_(False)
    return history


def _disc_step(state: TrainState, z_hr, z_hat, fused):
    d_cond = fused.detach() if state.config.disc_conditioned else None
    d_real = state.discriminator(z_hr, d_cond)
    d_fake = state.discriminator(z_hat.detach(), d_cond)
    if state.schedule.regime is Regime.EPSILON:
        loss_d, _ = gan_standard(d_real, d_fake)
    else:
        loss_d = ragan_discriminator_loss(d_real, d_fake)
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()
    return loss_d.item()


def train_step(batch_hq: torch.Tensor, state: TrainState, config: TrainConfig | None = None,
               example_ids: Iterable[int] | None = None) -> tuple[TrainState, dict]:
    """One generator update followed by one discriminator update (or the reverse order)."""
    config = config or state.config
    if batch_hq.shape[0] == 0:
        raise ValueError("empty batch")
    step = state.step + 1
    ids = list(range(batch_hq.shape[0])) if example_ids is None else list(example_ids)
    lq = degrade_batch(batch_hq, config, step, ids)
    mid = state.intermediate(lq)
    rng = torch.Generator().manual_seed(step_seed(config.seed, step))

    res = one_step(lq, mid, state.encoder, state.condition, state.projection, state.generator,
                   state.codec, state.schedule, rng, p_clean=config.p_clean)
    pred = res.image
    z_hr = state.codec.encode(batch_hq)

    def adversarial_and_d():
        state.discriminator.requires_grad_(False)
        d_cond = res.fused.detach() if config.disc_conditioned else None
        d_fake = state.discriminator(res.z_hat, d_cond)
        if state.schedule.regime is Regime.EPSILON:
            _, adv = gan_standard(d_fake, d_fake)
        else:
            adv = ragan_generator_loss(state.discriminator(z_hr, d_cond), d_fake)
        state.discriminator.requires_grad_(True)
        return adv

    loss_d = None
    if config.update_order == "d_then_g":
        loss_d = _disc_step(state, z_hr, res.z_hat, res.fused)

    terms = {"rec": reconstruction_loss(pred, batch_hq), "gan": adversarial_and_d()}
    if state.schedule.regime is Regime.EPSILON:
        terms["per"] = perceptual_loss_sd(batch_hq, pred, state.perceptual)
        terms["id"] = identity_loss(batch_hq, pred, state.identity)
        total = total_loss_sd(terms, config.weights)
    else:
        terms["per"] = perceptual_loss(batch_hq, pred, state.perceptual)
        total = total_loss_qwen(terms, config.weights)

    if not torch.isfinite(total):
        raise TrainingDiverged(step, {k: v.item() for k, v in terms.items()} | {"total": total.item()})

    scale = config.lr_factor(step)
    for opt, lr in ((state.opt_g, config.lr_generator), (state.opt_d, config.lr_discriminator)):
        for group in opt.param_groups:
            group["lr"] = lr * scale

    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()

    if loss_d is None:
        loss_d = _disc_step(state, z_hr, res.z_hat, res.fused)
    state.step = step

    metrics = {"step": step, "total": total.item()}
    metrics.update({k: v.item() for k, v in sorted(terms.items())})
    metrics["disc"] = loss_d
    if res.gate is not None:
        metrics["alpha_mean"] = res.gate.combined.mean().item()
    if res.f is not None:
        sigma_c = (1.0 - res.f) * state.schedule.sigma_T
        metrics["cond_sigma_mean"] = float(sigma_c.mean())
        metrics["cond_sigma_max"] = float(sigma_c.max())
        metrics["clean_skip_frac"] = float(res.skipped.double().mean())
    return state, metrics


def batch_ids(config: TrainConfig, step: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, step, 3])
    if n >= config.batch_size:
        return rng.permutation(n)[: config.batch_size]
    return rng.integers(0, n, size=config.batch_size)


def images_to_tensor(images: list[np.ndarray], size: int) -> torch.Tensor:
    t = to_tensor(images)
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)
    return t


def run_training(images: torch.Tensor, state: TrainState, steps: int | None = None,
                 on_metrics: Callable[[dict], None] | None = None,
                 on_step: Callable[[TrainState], None] | None = None) -> list[dict]:
    """Advance ``state`` until ``steps`` (default ``config.steps``) total steps are done."""
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    n = images.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    stream = []
    while state.step < steps:
        ids = batch_ids(cfg, state.step + 1, n)
        _, m = train_step(images[ids], state, cfg, ids)
        stream.append(m)
        if on_metrics is not None:
            on_metrics(m)
        if on_step is not None:
            on_step(state)
    return stream


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "schedule": state.schedule.to_dict(),
        "modules": {name: mod.state_dict() for name, mod in state.generator_modules().items()},
        "discriminator": state.discriminator.state_dict(),
        "restorer": state.restorer.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    config = config_from_mapping(payload["config"], source=str(path))
    state = build_state(config)
    state.schedule = NoiseSchedule.from_dict(payload["schedule"])
    for name, mod in state.generator_modules().items():
        mod.load_state_dict(payload["modules"][name])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.restorer.load_state_dict(payload["restorer"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.step = payload["step"]
    return state


def train(dataset_dir, config: TrainConfig, out_dir, resume=None) -> Path:
    """Train on every image in ``dataset_dir``; returns the final checkpoint path.

    Metrics go to ``out_dir/metrics.jsonl`` (one JSON object per step).  With
    ``resume`` the run continues from that checkpoint and appends to the stream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names, imgs = load_dir(dataset_dir)
    if not imgs:
        raise ValueError(f"no readable images in {dataset_dir}")
    if len(imgs) < config.batch_size:
        raise ValueError(f"{dataset_dir} has {len(imgs)} images, fewer than batch_size={config.batch_size}")
    images = images_to_tensor(imgs, config.image_size)

    metrics_path = out_dir / "metrics.jsonl"
    if resume is not None:
        state = load_checkpoint(resume)
        state.config.steps = config.steps
        mode = "a"
    else:
        state = build_state(config)
        pretrain_restorer(state, images)
        mode = "w"

    with open(metrics_path, mode) as sink:
        def write(m):
            sink.write(json.dumps(m, sort_keys=True) + "\n")
            sink.flush()

        def maybe_checkpoint(s):
            every = s.config.checkpoint_every
            if every and s.step % every == 0:
                save_checkpoint(s, out_dir / f"ckpt_{s.step:06d}.pt")

        run_training(images, state, config.steps, on_metrics=write, on_step=maybe_checkpoint)
    final = save_checkpoint(state, out_dir / "final.pt")
    log.info("trained %d steps on %d images -> %s", state.step, len(imgs), final)
    return final


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
