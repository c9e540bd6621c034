"""Token-sequence feature extraction and projection into the generator's condition space."""
from __future__ import annotations

import enum
import importlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class SourceTag(enum.Enum):
    FACE_MID = "face_mid"
    LR = "lr"
    FUSED = "fused"


@dataclass
class FeatureSequence:
    """``tokens`` is (B, N, d) or (N, d)."""

    tokens: torch.Tensor
    source_tag: SourceTag

    def __post_init__(self):
        if self.tokens.ndim not in (2, 3) or self.tokens.shape[-1] < 1 or self.tokens.shape[-2] < 1:
            raise ValueError(f"tokens must be (N, d) or (B, N, d) with N, d >= 1, got {tuple(self.tokens.shape)}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


class EncoderBackend(nn.Module):
    """Base class for image -> (B, N, d) encoders.

    Subclasses set ``name``, ``dim``, ``patch_size`` and ``native_size`` and
    implement ``forward`` on (B, C, H, W) tensors.
    """

    name = "abstract"
    dim: int
    patch_size: int
    native_size: int

    def token_grid(self, height: int, width: int) -> tuple[int, int]:
        p = self.patch_size
        if height % p or width % p:
            pad_h, pad_w = (-height) % p, (-width) % p
            raise ValueError(
                f"{height}x{width} is not divisible by patch size {p}; "
                f"pad by ({pad_h}, {pad_w}) pixels to {height + pad_h}x{width + pad_w}"
            )
        return height // p, width // p


class _MixBlock(nn.Module):
    """Pre-norm residual block: depthwise 3x3 over the token grid, GELU, pointwise linear."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.pw = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        b, n, d = x.shape
        h = self.norm(x).transpose(1, 2).reshape(b, d, *grid)
        h = F.gelu(self.dw(h)).reshape(b, d, n).transpose(1, 2)
        return x + self.pw(h)


class ToyEncoder(EncoderBackend):
    """Non-overlapping patchify -> linear embed -> ``depth`` local mixing blocks.

    With ``depth=0`` each token depends on exactly one patch; each mixing block
    grows the receptive field by one patch in every direction.
    """

    name = "toy"

    def __init__(self, patch_size: int = 8, dim: int = 32, in_channels: int = 3, depth: int = 2, native_size: int = 64):
        super().__init__()
        self.patch_size = patch_size
        self.dim = dim
        self.native_size = native_size
        self.embed = nn.Linear(in_channels * patch_size * patch_size, dim)
        self.blocks = nn.ModuleList(_MixBlock(dim) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        grid = self.token_grid(x.shape[-2], x.shape[-1])
        patches = F.unfold(x, self.patch_size, stride=self.patch_size).transpose(1, 2)
        tokens = self.embed(patches)
        for blk in self.blocks:
            tokens = blk(tokens, grid)
        return tokens


def load_backend(name: str = "toy", **kwargs) -> EncoderBackend:
    """Resolve ``toy`` or ``external:package.module:factory`` into a backend instance."""
    if name == "toy":
        return ToyEncoder(**kwargs)
    if name.startswith("external:"):
        target = name[len("external:"):]
        mod_name, _, attr = target.partition(":")
        if not attr:
            raise ValueError(f"external backend must look like external:module:factory, got {name!r}")
        factory = getattr(importlib.import_module(mod_name), attr)
        backend = factory(**kwargs)
        for field in ("dim", "patch_size", "native_size"):
            if not hasattr(backend, field):
                raise TypeError(f"external backend {name!r} lacks required attribute {field!r}")
        return backend
    raise ValueError(f"unknown encoder backend {name!r}")


def resize_for_backend(x: torch.Tensor, backend: EncoderBackend) -> torch.Tensor:
    s = backend.native_size
    if x.shape[-2:] == (s, s):
        return x
    return F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)


def encode(img: torch.Tensor, backend: EncoderBackend, tag: SourceTag = SourceTag.LR) -> FeatureSequence:
    """Encode a (B, C, H, W) or (C, H, W) image tensor into a token sequence."""
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    backend.token_grid(img.shape[-2], img.shape[-1])
    tokens = backend(img)
    return FeatureSequence(tokens[0] if squeeze else tokens, tag)


class Projection(nn.Module):
    """Lightweight linear map from fused features to the generator's condition width."""

    def __init__(self, in_dim: int, out_dim: int, identity_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        if identity_init:
            if in_dim != out_dim:
                raise ValueError("identity initialisation needs a square projection")
            with torch.no_grad():
                self.linear.weight.copy_(torch.eye(in_dim))
                self.linear.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def project(f: FeatureSequence, target_dim: int, params: Projection | None = None) -> FeatureSequence:
    if target_dim < 1:
        raise ValueError(f"target_dim must be >= 1, got {target_dim}")
    if params is None:
        params = Projection(f.dim, target_dim)
    if params.linear.out_features != target_dim or params.linear.in_features != f.dim:
        raise ValueError(
            f"projection maps {params.linear.in_features}->{params.linear.out_features}, "
            f"asked for {f.dim}->{target_dim}"
        )
    return FeatureSequence(params(f.tokens), f.source_tag)
