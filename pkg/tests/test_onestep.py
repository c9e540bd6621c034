import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faceprior.encoder import Projection, ToyEncoder
from faceprior.evaluation import psnr
from faceprior.imageio import to_numpy
from faceprior.onestep import (
    ConditionPath,
    ConvCodec,
    IdentityCodec,
    NoiseSchedule,
    Regime,
    SpaceToDepthCodec,
    StageError,
    ToyGenerator,
    build_lr_condition,
    cosine_alpha_bar,
    epsilon_one_step,
    latent_decode,
    latent_encode,
    lr_condition,
    make_codec,
    restore,
    rf_forward,
    rf_one_step,
)


# ---- codecs ----------------------------------------------------------------------


def test_identity_codec_roundtrip_exact():
    x = torch.rand(1, 3, 16, 16)
    c = IdentityCodec()
    y = latent_decode(latent_encode(x, c), c)
    assert torch.equal(x, y)
    assert psnr(to_numpy(y), to_numpy(x)) == 100.0


def test_strided_codec_latent_shape():
    assert latent_encode(torch.rand(1, 3, 64, 64), ConvCodec(3, 4, 8)).shape == (1, 4, 8, 8)


def test_space_to_depth_lossless():
    x = torch.rand(1, 3, 16, 16)
    c = SpaceToDepthCodec(4)
    z = c.encode(x)
    assert z.shape == (1, 48, 4, 4) and torch.equal(c.decode(z), x)


def test_codec_shape_errors():
    with pytest.raises(ValueError):
        ConvCodec().encode(torch.rand(1, 3, 60, 60))
    with pytest.raises(ValueError):
        make_codec("vae-xl")


# ---- schedules -----------------------------------------------------------------------


def test_default_schedules():
    eps = NoiseSchedule.default("epsilon")
    assert eps.fixed_T == 399 and eps.alpha_bar_T == pytest.approx(cosine_alpha_bar()[399])
    rf = NoiseSchedule.default("rf")
    assert rf.fixed_T == 750 and rf.sigma_T == 0.75


def test_cosine_table_monotone():
    a = cosine_alpha_bar()
    assert np.all(np.diff(a) <= 0) and 0 < a[-1] < a[0] <= 1


def test_schedule_roundtrip_and_validation():
    s = NoiseSchedule.default("epsilon", fixed_T=10)
    assert NoiseSchedule.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        NoiseSchedule(Regime.EPSILON, 1, alpha_bar_T=0.0)
    with pytest.raises(ValueError):
        NoiseSchedule(Regime.RECTIFIED_FLOW, 1, sigma_T=1.5)


# ---- epsilon regime -----------------------------------------------------------------------


def test_eps_alpha_one_is_identity():
    z = torch.randn(2, 3, 4, 4)
    assert torch.equal(epsilon_one_step(z, 1.0, torch.randn_like(z)), z)


def test_eps_zero_prediction_rescales():
    z = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert torch.allclose(epsilon_one_step(z, 0.36, torch.zeros_like(z)), z / 0.6)


def test_eps_singular():
    with pytest.raises(ZeroDivisionError):
        epsilon_one_step(torch.zeros(1), 0.0, torch.zeros(1))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.01, 1.0), seed=st.integers(0, 10**6))
def test_eps_forward_process_exact(a, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    z_T = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps
    assert torch.allclose(epsilon_one_step(z_T, a, eps), x0, atol=1e-5)


# ---- rectified flow --------------------------------------------------------------------------


def test_rf_forward_endpoints():
    z, n = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(rf_forward(z, 0.0, n), z)
    assert torch.equal(rf_forward(z, 1.0, n), n)


def test_rf_forward_scalar_arithmetic():
    out = rf_forward(torch.full((2, 2), 0.4, dtype=torch.float64), 0.75, torch.full((2, 2), -1.2, dtype=torch.float64))
    assert torch.allclose(out, torch.full((2, 2), -0.8, dtype=torch.float64), atol=1e-15)


def test_rf_one_step_degenerate():
    z, v = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(rf_one_step(z, 0.0, v), z)
    assert torch.equal(rf_one_step(z, 0.5, torch.zeros_like(z)), z)


@settings(max_examples=60, deadline=None)
@given(sigma=st.floats(0.0, 1.0), seed=st.integers(0, 10**6))
def test_rf_exactness(sigma, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    out = rf_one_step(rf_forward(x0, sigma, eps), sigma, eps - x0)
    assert torch.allclose(out, x0, atol=1e-12)


def test_rf_sigma_validation():
    with pytest.raises(ValueError):
        rf_forward(torch.zeros(1), 1.2, torch.zeros(1))


# ---- auxiliary condition ----------------------------------------------------------------------


def test_clean_skip_always():
    z = torch.randn(8, 3, 4, 4)
    zc, f, skipped = build_lr_condition(z, 0.75, torch.Generator().manual_seed(0), p_clean=1.0)
    assert torch.equal(zc, z) and torch.all(f == 1) and torch.all(skipped)


def test_f_one_keeps_clean():
    z = torch.randn(2, 3, 4, 4)
    assert torch.equal(lr_condition(z, 0.75, 1.0, torch.randn_like(z)), z)


def test_f_zero_scalar_arithmetic():
    zc = lr_condition(torch.ones(1, 1, 2, 2, dtype=torch.float64), 0.6, 0.0, torch.zeros(1, 1, 2, 2, dtype=torch.float64))
    assert torch.allclose(zc, torch.full_like(zc, 0.4))


def test_per_sample_f():
    z = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    n = torch.zeros_like(z)
    zc = lr_condition(z, 0.5, torch.tensor([0.0, 1.0], dtype=torch.float64), n)
    assert torch.allclose(zc[0], torch.full_like(zc[0], 0.5)) and torch.equal(zc[1], z[1])


def test_condition_noise_monotone_in_f():
    g = torch.Generator().manual_seed(3)
    z, n = torch.randn(1, 3, 8, 8, generator=g), torch.randn(1, 3, 8, 8, generator=g)
    dists = [float((lr_condition(z, 0.75, f, n) - z).norm()) for f in np.linspace(0, 1, 21)]
    assert all(a >= b - 1e-6 for a, b in zip(dists, dists[1:]))


def test_condition_deterministic_and_rate():
    z = torch.zeros(4000, 1, 1, 1)
    a = build_lr_condition(z, 0.75, torch.Generator().manual_seed(5), 0.5)
    b = build_lr_condition(z, 0.75, torch.Generator().manual_seed(5), 0.5)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    rate = a[2].double().mean().item()
    assert 0.46 < rate < 0.54
    noisy_f = a[1][~a[2]]
    assert 0 <= noisy_f.min() and noisy_f.max() < 1


def test_bad_p_clean():
    with pytest.raises(ValueError):
        build_lr_condition(torch.zeros(1), 0.5, torch.Generator(), 1.5)


# ---- generator and condition path ------------------------------------------------------------


def test_generator_shapes():
    gen = ToyGenerator(cond_dim=16, aux_channels=3)
    out = gen(torch.randn(2, 3, 16, 16), torch.full((2,), 750.0), torch.randn(2, 16, 16), torch.randn(2, 3, 16, 16))
    assert out.shape == (2, 3, 16, 16)
    with pytest.raises(ValueError):
        gen(torch.randn(2, 3, 16, 16), torch.full((2,), 750.0), torch.randn(2, 16, 16))


def test_passthrough_init_epsilon_returns_input():
    sched = NoiseSchedule.default("epsilon")
    gen = ToyGenerator(cond_dim=8)
    gen.init_passthrough(sched)
    z = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    eps = gen.double()(z, torch.full((1,), 399.0), torch.randn(1, 4, 8, dtype=torch.float64))
    assert torch.allclose(epsilon_one_step(z, sched.alpha_bar_T, eps), z, atol=1e-12)


def test_passthrough_init_rf_returns_condition():
    sched = NoiseSchedule.default("rf")
    gen = ToyGenerator(cond_dim=8, aux_channels=3).double()
    gen.init_passthrough(sched)
    z_T, zc = torch.randn(1, 3, 16, 16, dtype=torch.float64), torch.rand(1, 3, 16, 16, dtype=torch.float64)
    v = gen(z_T, torch.full((1,), 750.0), torch.randn(1, 4, 8, dtype=torch.float64), zc)
    assert torch.allclose(rf_one_step(z_T, sched.sigma_T, v), zc, atol=1e-12)


@pytest.mark.parametrize("mode", ["sdfm", "raw", "placeholder"])
@pytest.mark.parametrize("streams", ["both", "lr", "sr"])
def test_condition_path_modes(mode, streams):
    path = ConditionPath(8, 16, mode=mode, streams=streams)
    out, gate = path(torch.randn(2, 16, 8), torch.randn(2, 16, 8))
    assert out.shape == (2, 16, 8)
    assert (gate is not None) == (mode == "sdfm")


def test_placeholder_ignores_image():
    path = ConditionPath(8, 16, mode="placeholder")
    a, _ = path(torch.randn(1, 16, 8), torch.randn(1, 16, 8))
    b, _ = path(torch.randn(1, 16, 8), torch.randn(1, 16, 8))
    assert torch.equal(a, b)


# ---- restore --------------------------------------------------------------------------------


def _chain(regime):
    torch.manual_seed(0)
    enc = ToyEncoder(dim=8, depth=0).double()
    cond = ConditionPath(8, 64).double()
    return enc, cond, Projection(8, 8).double()


def test_restore_constructed_oracle_epsilon():
    enc, cond, proj = _chain("epsilon")
    sched = NoiseSchedule.default("epsilon")
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(1, 3, 64, 64, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 3, 64, 64, generator=g, dtype=torch.float64)
    a = sched.alpha_bar_T
    lq = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps

    def oracle_generator(z, t, c):
        return eps

    out = restore(lq, lambda x: x, enc, cond, oracle_generator, IdentityCodec(), sched, proj)
    assert psnr(to_numpy(out), to_numpy(x0)) > 40


def test_restore_constructed_oracle_rf():
    enc, cond, proj = _chain("rf")
    sched = NoiseSchedule.default("rf")
    x0 = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    lq = (x0 + 0.05).clamp(0, 1)

    def oracle_generator(z_T, t, c, z_cond, f):
        # the velocity that carries this z_T exactly onto the clean latent
        return (z_T - x0) / sched.sigma_T

    out = restore(lq, lambda x: x, enc, cond, oracle_generator, IdentityCodec(), sched, proj, seed=4)
    assert psnr(to_numpy(out), to_numpy(x0)) > 40


def test_restore_rf_sigma_zero_zero_velocity():
    enc, cond, proj = _chain("rf")
    sched = NoiseSchedule(Regime.RECTIFIED_FLOW, 0, sigma_T=0.0)
    lq = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    codec = SpaceToDepthCodec(2)
    out = restore(lq, lambda x: x, enc, cond, lambda z, *a: torch.zeros_like(z), codec, sched, proj)
    assert torch.equal(out, codec.decode(codec.encode(lq)))


def test_restore_deterministic():
    enc, cond, proj = _chain("rf")
    sched = NoiseSchedule.default("rf")
    gen = ToyGenerator(cond_dim=8, aux_channels=3).double()
    lq = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    a = restore(lq, lambda x: x, enc, cond, gen, IdentityCodec(), sched, proj, seed=9)
    b = restore(lq, lambda x: x, enc, cond, gen, IdentityCodec(), sched, proj, seed=9)
    assert torch.equal(a, b) and a.min() >= 0 and a.max() <= 1


def test_restore_stage_tagged_errors():
    enc, cond, proj = _chain("epsilon")
    sched = NoiseSchedule.default("epsilon")

    def broken(x):
        raise RuntimeError("restorer exploded")

    with pytest.raises(StageError) as info:
        restore(torch.rand(1, 3, 64, 64, dtype=torch.float64), broken, enc, cond, None, IdentityCodec(), sched, proj)
    assert info.value.stage == "intermediate_restore"
    bad_enc = ToyEncoder(patch_size=7, dim=8, native_size=64).double()
    with pytest.raises(StageError) as info:
        restore(torch.rand(1, 3, 64, 64, dtype=torch.float64), lambda x: x, bad_enc, cond, None, IdentityCodec(), sched, proj)
    assert info.value.stage == "encode"
