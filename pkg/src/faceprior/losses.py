"""Training objectives for both regimes, plus the pluggable perceptual/identity backends.

Images are NCHW tensors.  GAN terms take raw discriminator logits; every log
term goes through ``logsigmoid`` so logits in [-80, 80] stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t()
# gradient magnitude is sqrt(g^2 + eps) - sqrt(eps): zero on flat regions, smooth at 0
_MAG_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_G: float = 5e-3
    lambda_ID: float = 0.5
    lambda_per: float = 1.0
    lambda_rec: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")

    @classmethod
    def for_regime(cls, regime: str) -> "LossWeights":
        if str(regime) in ("rf", "Regime.RECTIFIED_FLOW"):
            return cls(lambda_G=0.02, lambda_ID=0.0, lambda_per=1.0, lambda_rec=1.0)
        return cls()


class PerceptualBackend(Protocol):
    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class IdentityBackend(Protocol):
    def embed(self, img: torch.Tensor) -> torch.Tensor: ...


class MSEPerceptual(nn.Module):
    """Plain pixel MSE behind the perceptual interface (hand-checkable stand-in)."""

    def distance(self, a, b):
        return ((a - b) ** 2).mean()


class ToyPerceptual(nn.Module):
    """Multi-scale feature distance through a frozen random conv stack.

    Distance = pixel MSE + sum over three feature scales of the mean squared
    feature difference.  Symmetric, and zero iff features coincide.
    """

    def __init__(self, channels: int = 3, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        specs = [(channels, 8, 1), (8, 16, 2), (16, 16, 2)]
        self.convs = nn.ModuleList()
        for cin, cout, stride in specs:
            conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
        self.requires_grad_(False)

    def features(self, x):
        feats = [x]
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def distance(self, a, b):
        return sum(((fa - fb) ** 2).mean() for fa, fb in zip(self.features(a), self.features(b)))


class ToyIdentity(nn.Module):
    """Frozen random conv embedder producing unit-norm vectors at a fixed input size."""

    def __init__(self, channels: int = 3, native_size: int = 32, embed_dim: int = 64, seed: int = 4321):
        super().__init__()
        self.native_size = native_size
        g = torch.Generator().manual_seed(seed)
        self.c1 = nn.Conv2d(channels, 8, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.fc = nn.Linear(16 * (native_size // 4) ** 2, embed_dim)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * (1.0 / max(1, p[0].numel())) ** 0.5)
        self.requires_grad_(False)

    def embed(self, img):
        s = self.native_size
        if img.shape[-2:] != (s, s):
            img = F.interpolate(img, size=(s, s), mode="bilinear", align_corners=False)
        # centre the input so the embedding depends on structure, not just mean brightness
        img = img - 0.5
        h = F.relu(self.c2(F.relu(self.c1(img))))
        return F.normalize(self.fc(h.flatten(1)), dim=-1)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(pred, target):
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean()


def identity_loss(img_a, img_b, backend: IdentityBackend):
    """1 - cosine similarity of identity embeddings, averaged over the batch."""
    ea, eb = backend.embed(img_a), backend.embed(img_b)
    cos = F.cosine_similarity(ea, eb, dim=-1).clamp(-1.0, 1.0)
    return (1.0 - cos).mean()


def sobel(img):
    """Per-channel Sobel gradient magnitude with replicate borders; accepts (C,H,W) or (B,C,H,W)."""
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    c = img.shape[1]
    kx = _SOBEL_X.to(img.dtype).expand(c, 1, 3, 3)
    ky = _SOBEL_Y.to(img.dtype).expand(c, 1, 3, 3)
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    eps = torch.tensor(_MAG_EPS, dtype=img.dtype)
    mag = torch.sqrt(gx * gx + gy * gy + eps) - torch.sqrt(eps)
    return mag[0] if squeeze else mag


def perceptual_loss_sd(hr, pred, backend: PerceptualBackend):
    """Backend distance on the images plus on their Sobel edge maps."""
    return backend.distance(hr, pred) + backend.distance(sobel(hr), sobel(pred))


def perceptual_loss(hr, pred, backend: PerceptualBackend):
    return backend.distance(hr, pred)


def gan_standard(d_real_logit, d_fake_logit):
    """Non-saturating conditional GAN losses ``(L_D, L_G)`` from logits."""
    l_d = -F.logsigmoid(d_real_logit).mean() - F.logsigmoid(-d_fake_logit).mean()
    l_g = -F.logsigmoid(d_fake_logit).mean()
    return l_d, l_g


def gan_relativistic_avg(d_real_logits, d_fake_logits):
    """Relativistic-average terms ``(L_D, L_G)`` in log-likelihood form.

    L_G = 1/2 [ E log(1 - s(D_r - E D_f)) + E log s(D_f - E D_r) ]
    and L_D is the same with real and fake exchanged.  Both are log-likelihoods
    (<= 0) that their owner maximises; ``ragan_generator_loss`` and
    ``ragan_discriminator_loss`` give the minimisation form.
    """
    if d_real_logits.numel() == 0 or d_fake_logits.numel() == 0:
        raise ValueError("relativistic GAN loss needs non-empty real and fake batches")
    real_rel = d_real_logits - d_fake_logits.mean()
    fake_rel = d_fake_logits - d_real_logits.mean()
    # log(1 - s(x)) == logsigmoid(-x)
    l_g = 0.5 * (F.logsigmoid(-real_rel).mean() + F.logsigmoid(fake_rel).mean())
    l_d = 0.5 * (F.logsigmoid(-fake_rel).mean() + F.logsigmoid(real_rel).mean())
    return l_d, l_g


def ragan_generator_loss(d_real_logits, d_fake_logits):
    return -gan_relativistic_avg(d_real_logits, d_fake_logits)[1]


def ragan_discriminator_loss(d_real_logits, d_fake_logits):
    return -gan_relativistic_avg(d_real_logits, d_fake_logits)[0]


def total_loss_sd(terms: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """``terms`` keys: ``gan``, ``id``, ``per``, ``rec``."""
    return (
        weights.lambda_G * terms["gan"]
        + weights.lambda_ID * terms["id"]
        + weights.lambda_per * terms["per"]
        + weights.lambda_rec * terms["rec"]
    )


def total_loss_qwen(terms: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """Three-term objective; ``weights.lambda_ID`` is ignored."""
    return weights.lambda_rec * terms["rec"] + weights.lambda_per * terms["per"] + weights.lambda_G * terms["gan"]


class PatchDiscriminator(nn.Module):
    """Small patch discriminator on latents, optionally biased by fused tokens.

    With ``cond_dim`` set, the token sequence is linearly mapped to one bias per
    mid-level channel, laid out on the token grid and added to the mid features.
    """

    def __init__(self, in_channels: int = 3, width: int = 16, cond_dim: int | None = None):
        super().__init__()
        self.c1 = nn.Conv2d(in_channels, width, 4, stride=2, padding=1)
        self.c2 = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * width, 1, 3, padding=1)
        self.cond = nn.Linear(cond_dim, 2 * width) if cond_dim else None

    def forward(self, z, cond_tokens=None):
        h = F.leaky_relu(self.c1(z), 0.2)
        h = self.c2(h)
        if self.cond is not None and cond_tokens is not None:
            b, n, _ = cond_tokens.shape
            g = int(round(n ** 0.5))
            bias = self.cond(cond_tokens).transpose(1, 2).reshape(b, -1, g, g)
            h = h + F.interpolate(bias, size=h.shape[-2:], mode="nearest")
        h = F.leaky_relu(h, 0.2)
        return self.c3(h).flatten(1)
