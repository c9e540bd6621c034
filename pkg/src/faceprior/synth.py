"""Procedural toy faces.

No face dataset ships with the package, so the overfit experiments and tests run
on cartoon faces drawn from a seed: skin-toned head, hair cap, eyes with irises,
brows, nose shading and a mouth arc, all anti-aliased by supersampling.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import write_png

_SUPERSAMPLE = 4


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def synth_face(size: int = 64, seed: int = 0) -> np.ndarray:
    """Draw one face as a float64 ``size x size x 3`` array in [0, 1]."""
    rng = np.random.default_rng(seed)
    n = size * _SUPERSAMPLE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n

    bg_top, bg_bot = rng.uniform(0.2, 0.9, 3), rng.uniform(0.1, 0.8, 3)
    img = bg_top * (1 - yy[..., None]) + bg_bot * yy[..., None]

    cy, cx = 0.52 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.05, 0.05)
    ry, rx = rng.uniform(0.30, 0.38), rng.uniform(0.24, 0.31)
    tilt = rng.uniform(-0.15, 0.15)
    skin = np.array([0.93, 0.76, 0.62]) * rng.uniform(0.55, 1.05)

    hair = rng.uniform(0.02, 0.55, 3) * np.array([1.0, 0.8, 0.6])
    hair_mask = _ellipse(yy, xx, cy - 0.08, cx, ry + 0.06, rx + 0.05, tilt)
    img[hair_mask] = hair

    head = _ellipse(yy, xx, cy, cx, ry, rx, tilt)
    # shading: darker towards the jaw and the sides
    shade = 1.0 - 0.25 * ((xx - cx) / rx) ** 2 - 0.1 * np.clip((yy - cy) / ry, 0, None)
    img[head] = (skin * shade[..., None])[head]
    fringe = hair_mask & (yy < cy - ry * rng.uniform(0.45, 0.7))
    img[fringe] = hair

    eye_dy = ry * rng.uniform(0.05, 0.2)
    eye_dx = rx * rng.uniform(0.33, 0.45)
    iris = rng.uniform(0.05, 0.6, 3)
    for sgn in (-1, 1):
        ey, ex = cy - eye_dy, cx + sgn * eye_dx
        er = rng.uniform(0.035, 0.05)
        img[_ellipse(yy, xx, ey, ex, er * 0.6, er * 1.3, tilt)] = (0.96, 0.96, 0.94)
        img[_ellipse(yy, xx, ey, ex + rng.uniform(-0.01, 0.01), er * 0.55, er * 0.55)] = iris
        img[_ellipse(yy, xx, ey, ex, er * 0.25, er * 0.25)] = (0.02, 0.02, 0.02)
        brow = _ellipse(yy, xx, ey - er * rng.uniform(1.3, 2.0), ex, 0.012, er * 1.5, sgn * 0.2 + tilt)
        img[brow] = hair * 0.7

    nose = _ellipse(yy, xx, cy + ry * 0.18, cx, ry * 0.18, 0.018)
    img[nose] *= 0.82

    my, mw = cy + ry * rng.uniform(0.45, 0.6), rx * rng.uniform(0.35, 0.55)
    smile = rng.uniform(-0.03, 0.05)
    lip_y = my + smile * ((xx - cx) / mw) ** 2
    mouth = (np.abs(yy - lip_y) < 0.014) & (np.abs(xx - cx) < mw)
    img[mouth] = np.array([0.65, 0.2, 0.25]) * rng.uniform(0.6, 1.0)

    img = img.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def write_faces(directory, count: int, size: int = 64, seed: int = 0) -> list[Path]:
    """Write ``count`` faces as ``face_000.png`` ... into ``directory``."""
    directory = Path(directory)
    paths = []
    for i in range(count):
        p = directory / f"face_{i:03d}.png"
        write_png(p, synth_face(size, seed * 1000 + i))
        paths.append(p)
    return paths
