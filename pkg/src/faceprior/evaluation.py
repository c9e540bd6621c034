"""Fidelity and identity metrics over prediction / ground-truth image directories."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from scipy.ndimage import correlate1d, uniform_filter

from .imageio import load_dir

PSNR_CAP = 100.0
REPORT_SCHEMA_VERSION = "1.0"
# columns that need pretrained networks; filled only when an external backend provides them
RESERVED_COLUMNS = ("lpips", "dists", "fid")

_LUMA = np.array([0.299, 0.587, 0.114])


def _check(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 3:
            return img @ _LUMA
        if img.shape[2] == 1:
            return img[..., 0]
        raise ValueError(f"unsupported channel count {img.shape[2]}")
    return img


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over the fully-valid window positions (luminance for RGB)."""
    a, b = _check(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} SSIM window")
    k = _gauss_window(window, sigma)

    def blur(img):
        return correlate1d(correlate1d(img, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    pad = (window - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


class IdentityEmbedder(Protocol):
    def embed(self, img: torch.Tensor) -> torch.Tensor: ...


def _embed(backend, img) -> np.ndarray:
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()
    with torch.no_grad():
        e = backend.embed(img)
    return np.asarray(e.detach().double().reshape(-1))


def identity_degree(a, b, backend: IdentityEmbedder) -> float:
    """Angle in degrees between the identity embeddings of two images."""
    ea, eb = _embed(backend, a), _embed(backend, b)
    cos = float(np.dot(ea, eb) / (np.linalg.norm(ea) * np.linalg.norm(eb)))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


class LandmarkDetector(Protocol):
    num_landmarks: int

    def detect(self, img: np.ndarray) -> np.ndarray:
        """Return a (K, 2) array of (x, y) pixel coordinates."""


class BrightestCornerDetector:
    """Test-only heuristic: brightest smoothed pixel in each image quadrant plus the centre block."""

    num_landmarks = 5

    def detect(self, img):
        g = uniform_filter(_gray(img), size=3, mode="nearest")
        h, w = g.shape
        boxes = [
            (0, h // 2, 0, w // 2), (0, h // 2, w // 2, w),
            (h // 2, h, 0, w // 2), (h // 2, h, w // 2, w),
            (h // 4, 3 * h // 4, w // 4, 3 * w // 4),
        ]
        pts = []
        for y0, y1, x0, x1 in boxes:
            sub = g[y0:y1, x0:x1]
            iy, ix = np.unravel_index(np.argmax(sub), sub.shape)
            pts.append((x0 + ix, y0 + iy))
        return np.asarray(pts, dtype=np.float64)


def landmark_distance(a, b, detector: LandmarkDetector) -> float:
    pa, pb = np.asarray(detector.detect(a), float), np.asarray(detector.detect(b), float)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[1] != 2:
        raise ValueError(f"landmark sets do not correspond: {pa.shape} vs {pb.shape}")
    return float(np.linalg.norm(pa - pb, axis=1).mean())


@dataclass
class MetricReport:
    rows: list[dict]
    aggregate: dict
    missing: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: str = REPORT_SCHEMA_VERSION

    COLUMNS = ("name", "psnr", "ssim", "id_degree", "lmd") + RESERVED_COLUMNS

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "rows": self.rows,
            "aggregate": self.aggregate,
            "missing": self.missing,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows + [dict(self.aggregate, name="MEAN")]:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in self.COLUMNS})
        return buf.getvalue()

    def to_table(self) -> str:
        cols = ("name", "psnr", "ssim", "id_degree", "lmd")
        lines = ["{:<24} {:>8} {:>7} {:>9} {:>7}".format("image", "PSNR", "SSIM", "Deg.", "LMD")]
        for r in self.rows + [dict(self.aggregate, name="MEAN")]:
            vals = [r.get(c) for c in cols[1:]]
            fmt = ["{:>8.3f}", "{:>7.4f}", "{:>9.3f}", "{:>7.3f}"]
            cells = [f.format(v) if v is not None else "{:>7}".format("-") for f, v in zip(fmt, vals)]
            lines.append("{:<24} ".format(str(r["name"])[:24]) + " ".join(cells))
        if self.missing:
            lines.append(f"missing pairs: {', '.join(self.missing)}")
        return "\n".join(lines)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_pairs(names, preds, gts, identity_backend=None, detector=None) -> MetricReport:
    rows = []
    for name, p, g in zip(names, preds, gts):
        row = {"name": name, "psnr": psnr(p, g), "ssim": ssim(p, g),
               "id_degree": identity_degree(p, g, identity_backend) if identity_backend is not None else None,
               "lmd": landmark_distance(p, g, detector) if detector is not None else None}
        row.update({c: None for c in RESERVED_COLUMNS})
        rows.append(row)
    agg = {c: _mean(r[c] for r in rows) for c in ("psnr", "ssim", "id_degree", "lmd")}
    agg.update({c: None for c in RESERVED_COLUMNS})
    config = {"psnr_cap": PSNR_CAP, "ssim_window": 11, "ssim_sigma": 1.5,
              "landmarks": getattr(detector, "num_landmarks", None),
              "identity_backend": type(identity_backend).__name__ if identity_backend is not None else None}
    return MetricReport(rows, agg, config=config)


def evaluate(pred_dir, gt_dir, identity_backend=None, detector=None) -> MetricReport:
    """Score every filename present in both directories."""
    pn, pimgs = load_dir(pred_dir)
    gn, gimgs = load_dir(gt_dir)
    pmap, gmap = dict(zip(pn, pimgs)), dict(zip(gn, gimgs))
    common = sorted(set(pmap) & set(gmap))
    if not common:
        raise ValueError(f"no matching filenames between {pred_dir} and {gt_dir}")
    report = evaluate_pairs(common, [pmap[n] for n in common], [gmap[n] for n in common], identity_backend, detector)
    report.missing = sorted(set(pmap) ^ set(gmap))
    report.config.update({"pred_dir": str(Path(pred_dir)), "gt_dir": str(Path(gt_dir))})
    return report
