"""Structure/detail adaptive fusion of two token sequences.

Both streams are layer-normalised and their absolute difference is formed.  A
channel gate (from token-pooled statistics) and a token gate (from per-token
concatenations) are multiplied, clamped to ``[eps, 1 - eps]`` and used as the
weight of a convex combination of the normalised face and LR features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoder import FeatureSequence, SourceTag


@dataclass
class GateTensor:
    channel: torch.Tensor  # (..., 1, d)
    token: torch.Tensor  # (..., N, 1)
    combined: torch.Tensor  # (..., N, d)


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))
    # zero final layer: both gates start at sigmoid(0) = 0.5
    nn.init.zeros_(mlp[2].weight)
    nn.init.zeros_(mlp[2].bias)
    return mlp


class SDFM(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None, eps: float = 0.01, pool: str = "mean", ln_eps: float = 1e-5):
        super().__init__()
        if not 0 < eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
        if pool not in ("mean", "max"):
            raise ValueError(f"pool must be 'mean' or 'max', got {pool!r}")
        hidden = hidden or dim
        self.dim = dim
        self.eps = eps
        self.pool = pool
        self.ln_face = nn.LayerNorm(dim, eps=ln_eps)
        self.ln_lr = nn.LayerNorm(dim, eps=ln_eps)
        self.mlp_c = _mlp(3 * dim, hidden, dim)
        self.mlp_t = _mlp(3 * dim, hidden, 1)

    def normalize_and_diff(self, f_face: torch.Tensor, f_lr: torch.Tensor):
        if f_face.shape != f_lr.shape:
            raise ValueError(f"shape mismatch: face {tuple(f_face.shape)} vs lr {tuple(f_lr.shape)}")
        if f_face.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {f_face.shape[-1]}")
        n_face = self.ln_face(f_face)
        n_lr = self.ln_lr(f_lr)
        return n_face, n_lr, (n_face - n_lr).abs()

    def _pool(self, x: torch.Tensor) -> torch.Tensor:
        if self.pool == "mean":
            return x.mean(dim=-2, keepdim=True)
        return x.amax(dim=-2, keepdim=True)

    def channel_gate(self, n_face, n_lr, n_diff) -> torch.Tensor:
        pooled = torch.cat([self._pool(n_face), self._pool(n_lr), self._pool(n_diff)], dim=-1)
        return torch.sigmoid(self.mlp_c(pooled))

    def token_gate(self, n_face, n_lr, n_diff) -> torch.Tensor:
        return torch.sigmoid(self.mlp_t(torch.cat([n_face, n_lr, n_diff], dim=-1)))

    def forward(self, f_face: torch.Tensor, f_lr: torch.Tensor) -> tuple[torch.Tensor, GateTensor]:
        n_face, n_lr, n_diff = self.normalize_and_diff(f_face, f_lr)
        a_c = self.channel_gate(n_face, n_lr, n_diff)
        a_t = self.token_gate(n_face, n_lr, n_diff)
        alpha = torch.clamp(a_t * a_c, self.eps, 1.0 - self.eps)
        fused = alpha * n_face + (1.0 - alpha) * n_lr
        return fused, GateTensor(a_c, a_t, alpha)


def normalize_and_diff(f_face: FeatureSequence, f_lr: FeatureSequence, params: SDFM):
    return params.normalize_and_diff(f_face.tokens, f_lr.tokens)


def fuse(f_face: FeatureSequence, f_lr: FeatureSequence, params: SDFM) -> tuple[FeatureSequence, GateTensor]:
    fused, gate = params(f_face.tokens, f_lr.tokens)
    return FeatureSequence(fused, SourceTag.FUSED), gate


def gate_heatmap(gate: GateTensor | torch.Tensor, grid_shape: tuple[int, int], cmap: str = "viridis") -> np.ndarray:
    """Per-token mean of the combined gate on the token grid, min-max scaled and colormapped.

    Returns a ``grid_h x grid_w x 3`` float array.  A constant gate maps to the
    colormap midpoint.
    """
    from matplotlib import colormaps

    combined = gate.combined if isinstance(gate, GateTensor) else gate
    combined = combined.detach().double()
    if combined.ndim == 3:
        combined = combined[0]
    n = combined.shape[0]
    gh, gw = grid_shape
    if gh * gw != n:
        raise ValueError(f"{n} tokens cannot be laid out on a {gh}x{gw} grid")
    per_token = combined.mean(dim=-1).numpy().reshape(gh, gw)
    lo, hi = per_token.min(), per_token.max()
    if hi - lo <= 1e-12:
        scaled = np.full_like(per_token, 0.5)
    else:
        scaled = (per_token - lo) / (hi - lo)
    return colormaps[cmap](scaled)[..., :3]
