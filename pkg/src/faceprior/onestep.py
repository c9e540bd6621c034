"""One-step generation under noise-prediction and rectified-flow regimes.

Latents are NCHW tensors.  ``epsilon_one_step``/``rf_forward``/``rf_one_step``/
``build_lr_condition`` are the closed-form schedule operations; ``ToyGenerator``
is the desk-scale stand-in for the denoising backbone and ``restore`` chains
intermediate restoration, encoding, fusion, projection, one step and decoding.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderBackend, Projection, SourceTag, encode, resize_for_backend
from .sdfm import SDFM, GateTensor

NUM_TRAIN_TIMESTEPS = 1000


class Regime(str, enum.Enum):
    EPSILON = "epsilon"
    RECTIFIED_FLOW = "rf"


class StageError(RuntimeError):
    """A failure inside one stage of the restoration chain, tagged with the stage name."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


def cosine_alpha_bar(num_steps: int = NUM_TRAIN_TIMESTEPS, s: float = 0.008) -> np.ndarray:
    """Cumulative signal coefficient for the squared-cosine schedule; index t is after t+1 steps."""
    t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    return np.clip(f[1:] / f[0], 1e-12, 1.0)


def sigma_for_timestep(t: int, num_steps: int = NUM_TRAIN_TIMESTEPS) -> float:
    return float(t) / num_steps


@dataclass
class NoiseSchedule:
    regime: Regime
    fixed_T: int
    alpha_bar_T: float = 1.0
    sigma_T: float = 0.0
    alpha_bar_table: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.regime = Regime(self.regime)
        if not 0 < self.alpha_bar_T <= 1:
            raise ValueError(f"alpha_bar_T must lie in (0, 1], got {self.alpha_bar_T}")
        if not 0 <= self.sigma_T <= 1:
            raise ValueError(f"sigma_T must lie in [0, 1], got {self.sigma_T}")

    @classmethod
    def default(cls, regime, fixed_T: int | None = None) -> "NoiseSchedule":
        regime = Regime(regime)
        if regime is Regime.EPSILON:
            t = 399 if fixed_T is None else int(fixed_T)
            table = cosine_alpha_bar()
            return cls(regime, t, alpha_bar_T=float(table[t]), alpha_bar_table=table.tolist())
        t = 750 if fixed_T is None else int(fixed_T)
        return cls(regime, t, sigma_T=sigma_for_timestep(t))

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "fixed_T": self.fixed_T,
            "alpha_bar_T": self.alpha_bar_T,
            "sigma_T": self.sigma_T,
            "alpha_bar_table": list(self.alpha_bar_table),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def epsilon_one_step(z_T: torch.Tensor, alpha_bar_T: float, eps_pred: torch.Tensor) -> torch.Tensor:
    if alpha_bar_T <= 0:
        raise ZeroDivisionError("alpha_bar_T = 0 makes the one-step estimate singular")
    if alpha_bar_T > 1:
        raise ValueError(f"alpha_bar_T must be <= 1, got {alpha_bar_T}")
    return (z_T - math.sqrt(1.0 - alpha_bar_T) * eps_pred) / math.sqrt(alpha_bar_T)


def rf_forward(z_lr: torch.Tensor, sigma_T: float, noise: torch.Tensor) -> torch.Tensor:
    if not 0 <= sigma_T <= 1:
        raise ValueError(f"sigma_T must lie in [0, 1], got {sigma_T}")
    return (1.0 - sigma_T) * z_lr + sigma_T * noise


def rf_one_step(z_T: torch.Tensor, sigma_T: float, v_pred: torch.Tensor) -> torch.Tensor:
    if not 0 <= sigma_T <= 1:
        raise ValueError(f"sigma_T must lie in [0, 1], got {sigma_T}")
    return z_T - sigma_T * v_pred


def lr_condition(z_lr: torch.Tensor, sigma_T: float, f, noise: torch.Tensor) -> torch.Tensor:
    """Noisy-LR condition for a given ``f`` (scalar or per-sample (B,)); noise level is (1 - f) * sigma_T."""
    f = torch.as_tensor(f, dtype=z_lr.dtype)
    sigma_c = ((1.0 - f) * sigma_T).reshape(-1, *([1] * (z_lr.ndim - 1))) if f.ndim else (1.0 - f) * sigma_T
    return (1.0 - sigma_c) * z_lr + sigma_c * noise


def build_lr_condition(z_lr: torch.Tensor, sigma_T: float, rng: torch.Generator, p_clean: float):
    """Sample the auxiliary condition per batch element.

    Returns ``(z_cond, f, skipped)``; skipped elements keep the clean latent and
    report ``f = 1``.
    """
    if not 0 <= p_clean <= 1:
        raise ValueError(f"p_clean must lie in [0, 1], got {p_clean}")
    b = z_lr.shape[0]
    u = torch.rand(b, generator=rng, dtype=torch.float64)
    f = torch.rand(b, generator=rng, dtype=torch.float64)
    noise = torch.randn(z_lr.shape, generator=rng, dtype=z_lr.dtype)
    skipped = u < p_clean
    f = torch.where(skipped, torch.ones_like(f), f)
    return lr_condition(z_lr, sigma_T, f.to(z_lr.dtype), noise), f, skipped


# ---------------------------------------------------------------------------
# latent codecs


class IdentityCodec(nn.Module):
    latent_channels = 3
    stride = 1

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class SpaceToDepthCodec(nn.Module):
    """Lossless strided codec: pixel-unshuffle by ``stride``."""

    def __init__(self, stride: int = 2, channels: int = 3):
        super().__init__()
        self.stride = stride
        self.latent_channels = channels * stride * stride

    def encode(self, x):
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by codec stride {self.stride}")
        return F.pixel_unshuffle(x, self.stride)

    def decode(self, z):
        return F.pixel_shuffle(z, self.stride)


class ConvCodec(nn.Module):
    """Learned lossy autoencoder with a single strided conv each way."""

    def __init__(self, channels: int = 3, latent_channels: int = 4, stride: int = 8):
        super().__init__()
        self.stride = stride
        self.latent_channels = latent_channels
        self.enc = nn.Conv2d(channels, latent_channels, stride, stride=stride)
        self.dec = nn.ConvTranspose2d(latent_channels, channels, stride, stride=stride)

    def encode(self, x):
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by codec stride {self.stride}")
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)


def make_codec(name: str):
    if name == "identity":
        return IdentityCodec()
    if name.startswith("s2d"):
        return SpaceToDepthCodec(int(name[3:] or 2))
    if name == "conv":
        return ConvCodec()
    raise ValueError(f"unknown codec {name!r}")


def latent_encode(img, codec):
    return codec.encode(img)


def latent_decode(z, codec):
    return codec.decode(z)


# ---------------------------------------------------------------------------
# toy generator


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(F.silu(x))))


class ToyGenerator(nn.Module):
    """Two-level conv net predicting noise (epsilon regime) or velocity (rf regime).

    Conditioning:
      * timestep -> sinusoidal embedding -> per-channel bias;
      * auxiliary latent (rf regime) -> concatenated with the noisy latent;
      * semantic tokens (B, N, D) -> per-token scale/shift laid out on the
        sqrt(N) x sqrt(N) token grid and upsampled onto the half-resolution
        features.  This stands in for the backbone's text-condition slot.
    """

    def __init__(
        self,
        latent_channels: int = 3,
        cond_dim: int = 64,
        width: int = 16,
        aux_channels: int = 0,
        time_dim: int = 32,
        f_embedding: bool = False,
    ):
        super().__init__()
        w2 = 2 * width
        self.aux_channels = aux_channels
        self.time_dim = time_dim
        self.f_embedding = f_embedding
        in_ch = latent_channels + aux_channels
        self.inp = nn.Conv2d(in_ch, width, 3, padding=1)
        self.down = nn.Conv2d(width, w2, 3, stride=2, padding=1)
        self.time = nn.Sequential(nn.Linear(time_dim, w2), nn.SiLU(), nn.Linear(w2, w2))
        self.f_proj = nn.Sequential(nn.Linear(time_dim, w2), nn.SiLU(), nn.Linear(w2, 2 * (w2 + width))) if f_embedding else None
        self.mod = nn.Linear(cond_dim, 2 * w2)
        self.res1 = _ResBlock(w2)
        self.res2 = _ResBlock(w2)
        self.up = nn.Conv2d(w2, width, 3, padding=1)
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, latent_channels, 1)
        self.register_buffer("passthrough", torch.zeros(latent_channels, in_ch))

    def _modulation(self, cond: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, _ = cond.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"semantic condition needs a square token count, got {n}")
        m = self.mod(cond).transpose(1, 2).reshape(b, -1, g, g)
        m = F.interpolate(m, size=size, mode="nearest")
        scale, shift = m.chunk(2, dim=1)
        return scale, shift

    def forward(self, z_t, t, cond, aux=None, f=None):
        if self.aux_channels:
            if aux is None:
                raise ValueError("this generator expects an auxiliary latent")
            x = torch.cat([z_t, aux], dim=1)
        else:
            x = z_t
        h0 = self.inp(x)
        f_mod = None
        if self.f_proj is not None and f is not None:
            # FiLM at both resolutions: the condition's noise level decides how much of the
            # noisy latent reaches the output, including through the full-resolution skip
            f_mod = self.f_proj(timestep_embedding(f * NUM_TRAIN_TIMESTEPS, self.time_dim).to(x.dtype))
            s0, b0, s1, b1 = f_mod.split([h0.shape[1], h0.shape[1], self.down.out_channels, self.down.out_channels], dim=-1)
            h0 = h0 * (1 + s0[:, :, None, None]) + b0[:, :, None, None]
        h0 = F.silu(h0)
        h = self.down(h0)
        h = h + self.time(timestep_embedding(t, self.time_dim).to(x.dtype))[:, :, None, None]
        if f_mod is not None:
            h = h * (1 + s1[:, :, None, None]) + b1[:, :, None, None]
        scale, shift = self._modulation(cond, h.shape[-2:])
        h = h * (1 + scale) + shift
        h = self.res2(self.res1(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.up(h)) + h0
        base = torch.einsum("oc,bchw->bohw", self.passthrough, x)
        return self.out(h) + self.skip(x) + base

    @torch.no_grad()
    def init_passthrough(self, schedule: "NoiseSchedule") -> None:
        """Add a fixed linear term so the untrained network restores nothing: it returns the LQ latent.

        epsilon regime: eps = z_T (1 - sqrt(a)) / sqrt(1 - a) makes the one-step estimate equal z_T.
        rf regime: v = (z_T - z_cond) / sigma makes z_T - sigma v equal z_cond.
        The term is a buffer, not a parameter, so it cannot drift towards a compromise across the
        noise levels of the auxiliary condition; the network learns the residual on top of it.
        """
        c = self.out.out_channels
        w = torch.zeros(c, self.skip.in_channels, dtype=torch.float64)
        eye = torch.eye(c, dtype=torch.float64)
        if schedule.regime is Regime.EPSILON:
            a = schedule.alpha_bar_T
            if a < 1:
                w[:, :c] = eye * (1 - math.sqrt(a)) / math.sqrt(1 - a)
        elif schedule.sigma_T > 0 and self.aux_channels == c:
            w[:, :c] = eye / schedule.sigma_T
            w[:, c:] = -eye / schedule.sigma_T
        self.passthrough.copy_(w)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        nn.init.zeros_(self.skip.weight)
        nn.init.zeros_(self.skip.bias)


# ---------------------------------------------------------------------------
# condition pathway


class ConditionPath(nn.Module):
    """Turns the two encoded streams into the semantic condition before projection.

    ``mode``: ``sdfm`` (adaptive fusion), ``raw`` (linear map of the concatenated
    streams, no gating) or ``placeholder`` (a learned constant token sequence,
    ignoring the image).  ``streams``: ``both``, ``lr`` (intermediate result
    replaced by the LQ stream) or ``sr`` (LQ stream replaced by the intermediate).
    """

    def __init__(self, dim: int, num_tokens: int, mode: str = "sdfm", streams: str = "both", eps: float = 0.01, pool: str = "mean"):
        super().__init__()
        if mode not in ("sdfm", "raw", "placeholder"):
            raise ValueError(f"unknown condition mode {mode!r}")
        if streams not in ("both", "lr", "sr"):
            raise ValueError(f"unknown streams option {streams!r}")
        self.mode, self.streams = mode, streams
        if mode == "sdfm":
            self.sdfm = SDFM(dim, eps=eps, pool=pool)
        elif mode == "raw":
            self.raw = nn.Linear(2 * dim, dim)
        else:
            self.placeholder = nn.Parameter(torch.randn(num_tokens, dim) * 0.02)

    def forward(self, f_face: torch.Tensor, f_lr: torch.Tensor) -> tuple[torch.Tensor, GateTensor | None]:
        if self.streams == "lr":
            f_face = f_lr
        elif self.streams == "sr":
            f_lr = f_face
        if self.mode == "sdfm":
            return self.sdfm(f_face, f_lr)
        if self.mode == "raw":
            return self.raw(torch.cat([f_face, f_lr], dim=-1)), None
        return self.placeholder.expand(f_face.shape[0], -1, -1), None


# ---------------------------------------------------------------------------
# full chain


@dataclass
class OneStepResult:
    image: torch.Tensor  # decoded, unclamped
    z_hat: torch.Tensor
    fused: torch.Tensor
    cond: torch.Tensor
    gate: GateTensor | None
    z_cond: torch.Tensor | None = None
    f: torch.Tensor | None = None
    skipped: torch.Tensor | None = None


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, StageError) and isinstance(ev, Exception):
            raise StageError(self.name, ev) from ev
        return False


def one_step(
    lq: torch.Tensor,
    mid: torch.Tensor,
    encoder: EncoderBackend,
    condition: ConditionPath | SDFM,
    projection: Projection | None,
    generator: Callable,
    codec,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    p_clean: float = 1.0,
) -> OneStepResult:
    """Forward chain from (LQ, intermediate) image batches to the decoded estimate."""
    with _Stage("encode"):
        f_face = encode(resize_for_backend(mid, encoder), encoder, SourceTag.FACE_MID).tokens
        f_lr = encode(resize_for_backend(lq, encoder), encoder, SourceTag.LR).tokens
    with _Stage("fuse"):
        fused, gate = condition(f_face, f_lr)
    with _Stage("project"):
        cond = projection(fused) if projection is not None else fused
    with _Stage("latent_encode"):
        z_lr = codec.encode(lq)
    b = lq.shape[0]
    t = torch.full((b,), float(schedule.fixed_T))
    z_cond = f = skipped = None
    with _Stage("generate"):
        if schedule.regime is Regime.EPSILON:
            eps = generator(z_lr, t, cond)
            z_hat = epsilon_one_step(z_lr, schedule.alpha_bar_T, eps)
        else:
            noise = torch.randn(z_lr.shape, generator=rng, dtype=z_lr.dtype)
            z_T = rf_forward(z_lr, schedule.sigma_T, noise)
            z_cond, f, skipped = build_lr_condition(z_lr, schedule.sigma_T, rng, p_clean)
            v = generator(z_T, t, cond, z_cond, f.to(z_lr.dtype))
            z_hat = rf_one_step(z_T, schedule.sigma_T, v)
    with _Stage("latent_decode"):
        image = codec.decode(z_hat)
    return OneStepResult(image, z_hat, fused, cond, gate, z_cond, f, skipped)


@torch.no_grad()
def restore(
    lq_img: torch.Tensor,
    intermediate_restorer: Callable[[torch.Tensor], torch.Tensor],
    encoder: EncoderBackend,
    sdfm: ConditionPath | SDFM,
    generator: Callable,
    codec,
    schedule: NoiseSchedule,
    projection: Projection | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Restore a (B, 3, H, W) batch in [0, 1]; the result is clamped to [0, 1].

    At inference the rectified-flow auxiliary condition is the clean LQ latent.
    """
    squeeze = lq_img.ndim == 3
    if squeeze:
        lq_img = lq_img[None]
    with _Stage("intermediate_restore"):
        mid = intermediate_restorer(lq_img)
    rng = torch.Generator().manual_seed(int(seed))
    out = one_step(lq_img, mid, encoder, sdfm, projection, generator, codec, schedule, rng, p_clean=1.0)
    img = out.image.clamp(0.0, 1.0)
    return img[0] if squeeze else img
