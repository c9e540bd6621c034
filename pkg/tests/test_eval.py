import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from faceprior.evaluation import (
    PSNR_CAP,
    RESERVED_COLUMNS,
    BrightestCornerDetector,
    MetricReport,
    evaluate,
    evaluate_pairs,
    identity_degree,
    landmark_distance,
    psnr,
    ssim,
)
from faceprior.imageio import write_png
from faceprior.losses import ToyIdentity


class AngleBackend:
    """Embeds an image at angle (mean intensity * 180) degrees on the unit circle."""

    def embed(self, img):
        theta = math.radians(float(img.double().mean()) * 180.0)
        return torch.tensor([[math.cos(theta), math.sin(theta)]], dtype=torch.float64)


class ChannelPeakDetector:
    """Synthetic detector: one landmark per channel at that channel's brightest pixel."""

    num_landmarks = 3

    def detect(self, img):
        img = np.asarray(img)
        pts = []
        for c in range(img.shape[2]):
            y, x = np.unravel_index(np.argmax(img[..., c]), img.shape[:2])
            pts.append((x, y))
        return np.asarray(pts, dtype=np.float64)


def const(value, shape=(32, 32, 3)):
    return np.full(shape, value, dtype=np.float64)


# --- PSNR ---------------------------------------------------------------------


def test_psnr_uniform_difference_tenth():
    a = np.random.default_rng(0).uniform(0, 0.8, (16, 16, 3))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6


def test_psnr_one_level_of_eight_bit():
    a = const(0.5)
    assert psnr(a, a + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr(a, a + 1 / 255) == pytest.approx(48.13, abs=5e-3)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(1).random((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        psnr(const(0, (8, 8, 3)), const(0, (8, 9, 3)))


def test_psnr_matches_loop():
    rng = np.random.default_rng(2)
    a, b = rng.random((5, 7, 3)), rng.random((5, 7, 3))
    acc = 0.0
    for i in range(5):
        for j in range(7):
            for c in range(3):
                acc += (a[i, j, c] - b[i, j, c]) ** 2
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (acc / 105)), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_psnr_antitone_in_mse(d1, d2):
    a = const(0.25, (4, 4, 1))
    if abs(d1 - d2) < 1e-9:
        return
    lo, hi = sorted((d1, d2))
    assert psnr(a, a + lo) > psnr(a, a + hi)


# --- SSIM ---------------------------------------------------------------------


def test_ssim_identical_is_one():
    a = np.random.default_rng(3).random((32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_checkerboard_is_low():
    yy, xx = np.mgrid[0:32, 0:32]
    board = (((yy // 4) + (xx // 4)) % 2).astype(np.float64)
    assert ssim(board, 1 - board) < 0.2


def test_ssim_constant_images_luminance_only():
    u, w = 0.3, 0.7
    c1 = 0.01 ** 2
    expected = (2 * u * w + c1) / (u * u + w * w + c1)
    assert ssim(const(u, (24, 24)), const(w, (24, 24))) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(4)
    a = rng.random((40, 48))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_rgb_uses_luminance():
    rng = np.random.default_rng(5)
    a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
    luma = np.array([0.299, 0.587, 0.114])
    assert ssim(a, b) == pytest.approx(ssim(a @ luma, b @ luma), abs=1e-12)


def test_ssim_too_small_for_window():
    with pytest.raises(ValueError, match="smaller than"):
        ssim(const(0.5, (10, 10)), const(0.5, (10, 10)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-9
    assert -1.0 <= s <= 1.0


# --- identity angle and landmarks ---------------------------------------------


class CosHalfBackend:
    """Dark images map to e1, bright images to a unit vector at cos 0.5 from e1."""

    def embed(self, img):
        if float(img.mean()) < 0.5:
            return torch.tensor([1.0, 0.0], dtype=torch.float64)
        return torch.tensor([0.5, math.sqrt(0.75)], dtype=torch.float64)


def test_identity_degree_cos_half_is_sixty():
    assert abs(identity_degree(const(0.0), const(1.0), CosHalfBackend()) - 60.0) < 1e-6


def test_identity_degree_orthogonal_is_ninety():
    assert identity_degree(const(0.0), const(0.5), AngleBackend()) == pytest.approx(90.0, abs=1e-6)


def test_identity_degree_identical_is_zero():
    a = np.random.default_rng(6).random((32, 32, 3)).astype(np.float32)
    assert identity_degree(a, a, ToyIdentity()) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_identity_degree_symmetric_and_in_range(u, v):
    d = identity_degree(const(u, (4, 4, 3)), const(v, (4, 4, 3)), AngleBackend())
    assert 0.0 <= d <= 180.0
    assert d == pytest.approx(identity_degree(const(v, (4, 4, 3)), const(u, (4, 4, 3)), AngleBackend()), abs=1e-9)
    assert d == pytest.approx(abs(u - v) * 180, abs=1e-5)


def _blobs(offset=(0, 0)):
    img = np.zeros((32, 32, 3))
    for c, (x, y) in enumerate([(5, 6), (20, 8), (12, 18)]):
        img[y + offset[1], x + offset[0], c] = 1.0
    return img


def test_landmark_distance_pythagorean_shift():
    assert landmark_distance(_blobs(), _blobs((3, 4)), ChannelPeakDetector()) == pytest.approx(5.0, abs=1e-12)


def test_landmark_distance_single_pair_is_distance():
    class One:
        num_landmarks = 1

        def detect(self, img):
            return np.array([[img[0, 0, 0] * 10, 0.0]])

    assert landmark_distance(const(0.2), const(0.9), One()) == pytest.approx(7.0)


def test_landmark_distance_identical_is_zero(faces):
    assert landmark_distance(faces[0], faces[0], BrightestCornerDetector()) == 0.0


def test_landmark_distance_mismatched_sets():
    class Varying:
        def detect(self, img):
            return np.zeros((int(img.mean() * 10) + 1, 2))

    with pytest.raises(ValueError, match="do not correspond"):
        landmark_distance(const(0.0), const(0.5), Varying())


# --- reports ------------------------------------------------------------------


def _write_dir(d, imgs, names):
    d.mkdir(parents=True, exist_ok=True)
    for n, im in zip(names, imgs):
        write_png(d / n, im)
    return d


def test_evaluate_same_dir_is_perfect(tmp_path, faces):
    d = _write_dir(tmp_path / "a", faces[:2], ["x.png", "y.png"])
    r = evaluate(d, d, ToyIdentity(), BrightestCornerDetector())
    assert r.aggregate["psnr"] == PSNR_CAP
    assert r.aggregate["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert r.aggregate["id_degree"] == pytest.approx(0.0, abs=1e-3)
    assert r.aggregate["lmd"] == 0.0
    assert r.missing == []
    assert r.config["landmarks"] == 5


def test_evaluate_single_pair_aggregate_equals_row(tmp_path, faces):
    p = _write_dir(tmp_path / "p", [faces[0]], ["a.png"])
    g = _write_dir(tmp_path / "g", [faces[1]], ["a.png"])
    r = evaluate(p, g, ToyIdentity(), BrightestCornerDetector())
    for k in ("psnr", "ssim", "id_degree", "lmd"):
        assert r.aggregate[k] == r.rows[0][k]


def test_evaluate_lists_missing_pairs(tmp_path, faces):
    p = _write_dir(tmp_path / "p", faces[:2], ["a.png", "b.png"])
    g = _write_dir(tmp_path / "g", [faces[0], faces[2]], ["a.png", "c.png"])
    r = evaluate(p, g)
    assert [row["name"] for row in r.rows] == ["a.png"]
    assert r.missing == ["b.png", "c.png"]
    assert "missing pairs: b.png, c.png" in r.to_table()
    assert r.rows[0]["id_degree"] is None


def test_evaluate_empty_intersection(tmp_path, faces):
    p = _write_dir(tmp_path / "p", [faces[0]], ["a.png"])
    g = _write_dir(tmp_path / "g", [faces[0]], ["b.png"])
    with pytest.raises(ValueError, match="no matching filenames"):
        evaluate(p, g)


def test_report_serializations(faces):
    r = evaluate_pairs(["a", "b"], faces[:2], faces[1:3])
    d = r.to_dict()
    assert d["schema_version"] == "1.0"
    assert set(RESERVED_COLUMNS) <= set(d["rows"][0])
    assert all(d["rows"][0][c] is None for c in RESERVED_COLUMNS)
    lines = r.to_csv().strip().splitlines()
    assert lines[0].split(",") == list(MetricReport.COLUMNS)
    assert lines[-1].startswith("MEAN,")
    assert len(lines) == 4
    assert "MEAN" in r.to_table()
