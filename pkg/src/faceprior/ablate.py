"""Condition-pathway ablation: placeholder tokens vs raw features vs adaptive fusion."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .evaluation import BrightestCornerDetector, evaluate_pairs
from .imageio import to_numpy
from .losses import ToyIdentity
from .train import build_state, degrade_batch, pretrain_restorer, run_training

VARIANTS = ("placeholder", "raw", "sdfm")
# which condition sources each variant uses, in the layout of the comparison table
VARIANT_FLAGS = {
    "placeholder": {"features": False, "fusion": False, "placeholder": True},
    "raw": {"features": True, "fusion": False, "placeholder": False},
    "sdfm": {"features": True, "fusion": True, "placeholder": False},
}
HELDOUT_SALT = 99


@dataclass
class AblationReport:
    runs: list[dict]  # one row per (variant, seed)
    table: list[dict]  # seed-averaged row per variant
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"runs": self.runs, "table": self.table, "config": self.config}

    def to_table(self) -> str:
        def mark(b):
            return "x" if b else " "

        lines = ["{:<12} {:^8} {:^6} {:^11} {:>8} {:>7} {:>8} {:>7}".format(
            "variant", "features", "fusion", "placeholder", "PSNR", "SSIM", "Deg.", "LMD")]
        for r in self.table:
            f = VARIANT_FLAGS[r["variant"]]
            lines.append("{:<12} {:^8} {:^6} {:^11} {:>8.3f} {:>7.4f} {:>8.3f} {:>7.3f}".format(
                r["variant"], mark(f["features"]), mark(f["fusion"]), mark(f["placeholder"]),
                r["psnr"], r["ssim"], r["id_degree"], r["lmd"]))
        return "\n".join(lines)


def heldout_pairs(images: torch.Tensor, config: TrainConfig, heldout: torch.Tensor | None = None):
    """LQ/GT pairs never seen in training: fresh degradation draws (separate salt) of ``heldout``
    or, when absent, of the training images."""
    gt = images if heldout is None else heldout
    lq = degrade_batch(gt, config, 0, range(gt.shape[0]), salt=HELDOUT_SALT)
    return lq, gt


def run_variant(config: TrainConfig, images: torch.Tensor, lq: torch.Tensor, gt: torch.Tensor) -> dict:
    state = build_state(config)
    pretrain_restorer(state, images)
    stream = run_training(images, state)
    out = state.restore(lq, seed=config.seed)
    names = [f"pair_{i:03d}" for i in range(gt.shape[0])]
    report = evaluate_pairs(names, [to_numpy(o[None]) for o in out], [to_numpy(g[None]) for g in gt],
                            ToyIdentity(), BrightestCornerDetector())
    row = {"variant": config.condition_mode, "streams": config.streams, "seed": config.seed}
    row.update({k: report.aggregate[k] for k in ("psnr", "ssim", "id_degree", "lmd")})
    row["final_total"] = stream[-1]["total"] if stream else None
    return row


def ablate(config: TrainConfig, variants, images: torch.Tensor, seeds=(0,), streams: str = "both",
           heldout: torch.Tensor | None = None) -> AblationReport:
    variants = list(variants)
    if not variants:
        raise ValueError("need at least one variant")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variant(s) {unknown}; choose from {list(VARIANTS)}")
    runs = []
    for seed in seeds:
        for v in variants:
            cfg = dataclasses.replace(config, condition_mode=v, streams=streams, seed=int(seed))
            # held-out pairs depend on the seed only, so every variant sees the same ones
            lq, gt = heldout_pairs(images, cfg, heldout)
            runs.append(run_variant(cfg, images, lq, gt))
    table = []
    for v in variants:
        rows = [r for r in runs if r["variant"] == v]
        agg = {"variant": v, "streams": streams, "seeds": [r["seed"] for r in rows]}
        for k in ("psnr", "ssim", "id_degree", "lmd"):
            agg[k] = float(np.mean([r[k] for r in rows]))
        table.append(agg)
    return AblationReport(runs, table, {"base_config": config.to_dict(), "variants": variants,
                                        "seeds": list(seeds), "streams": streams})
