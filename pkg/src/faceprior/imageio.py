"""PNG reading/writing and conversions between HWC arrays and NCHW tensors."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def read_image(path) -> np.ndarray:
    """Load an image as float64 HxWx3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dir(directory) -> tuple[list[str], list[np.ndarray]]:
    """Read every readable image in ``directory``; unreadable files are skipped with a warning."""
    names, imgs = [], []
    for p in list_images(directory):
        try:
            imgs.append(read_image(p))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        names.append(p.name)
    return names, imgs


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxWxC (or a list of them) -> NxCxHxW."""
    if isinstance(img, (list, tuple)):
        return torch.cat([to_tensor(i, dtype) for i in img])
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """NxCxHxW (N == 1) or CxHxW -> HxWxC float64."""
    t = t.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return t.double().numpy().transpose(1, 2, 0)
