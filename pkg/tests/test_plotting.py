import numpy as np
from PIL import Image

from faceprior.plotting import gate_figure, loss_curves, metric_bars, psnr_histogram


def _is_png(p):
    with Image.open(p) as im:
        return im.format == "PNG" and im.size[0] > 50


def test_gate_figure(tmp_path):
    grids = {"combined": np.random.default_rng(0).random((4, 4)), "token": np.eye(4)}
    assert _is_png(gate_figure(grids, tmp_path / "sub" / "g.png"))


def test_loss_curves(tmp_path):
    metrics = [{"step": s, "total": 1.0 / s, "rec": 0.5 / s, "gan": 0.7} for s in range(1, 11)]
    assert _is_png(loss_curves(metrics, tmp_path / "l.png"))


def test_metric_bars_and_histogram(tmp_path):
    rows = [{"variant": "raw", "psnr": 25.0}, {"variant": "sdfm", "psnr": 26.0}]
    assert _is_png(metric_bars(rows, tmp_path / "b.png"))
    assert _is_png(psnr_histogram([20.0, 21.5, 23.0], tmp_path / "h.png", reference=[19.0, 20.0]))
