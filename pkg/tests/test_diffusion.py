import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from faceinpaint import diffusion as dc
from faceinpaint.errors import MaskError, NumericError, OrderingError, ParameterError, ShapeError


def test_single_step_schedule():
    s = dc.make_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [1.0, 0.9], rtol=0, atol=1e-15)


def test_fifty_step_schedule_is_decreasing():
    s = dc.make_schedule(50)
    assert len(s.alpha_bar) == 51
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = dc.make_schedule(1000, kind=kind)
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    np.testing.assert_allclose(s.rho, np.sqrt(1 - s.alpha_bar))


def test_alpha_bar_matches_loop_oracle():
    s = dc.make_schedule(10, 1e-4, 2e-2)
    ab, out = 1.0, [1.0]
    for k in range(10):
        beta = 1e-4 + (2e-2 - 1e-4) * k / 9
        ab *= 1.0 - beta
        out.append(ab)
    np.testing.assert_allclose(s.alpha_bar, out, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kw,field", [
    ({"T": 0}, "T"), ({"T": 10, "beta_min": 0.0}, "beta_min"),
    ({"T": 10, "beta_min": 0.1, "beta_max": 0.05}, "beta_max"), ({"T": 10, "beta_max": 1.0}, "beta_max"),
    ({"T": 10, "kind": "quadratic"}, "kind"),
])
def test_schedule_errors_name_field(kw, field):
    with pytest.raises(ParameterError, match=field):
        dc.make_schedule(**kw)


def test_q_sample_trivial(schedule):
    z0 = torch.randn(3, 8, 8, dtype=torch.float64)
    assert torch.equal(dc.q_sample(z0, 0, torch.randn_like(z0), schedule), z0)
    out = dc.q_sample(z0, 500, torch.zeros_like(z0), schedule)
    torch.testing.assert_close(out, math.sqrt(schedule.alpha_bar[500]) * z0, rtol=0, atol=0)
    with pytest.raises(ShapeError):
        dc.q_sample(z0, 3, torch.zeros(3, 4, 4), schedule)
    with pytest.raises(ParameterError):
        dc.q_sample(z0, 1001, torch.zeros_like(z0), schedule)


def test_q_sample_batched_timesteps_match_scalar(schedule):
    z0 = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 10, 500, 1000])
    out = dc.q_sample(z0, t, eps, schedule)
    for b in range(4):
        torch.testing.assert_close(out[b], dc.q_sample(z0[b], int(t[b]), eps[b], schedule))


def test_one_step_prediction_inverts_q_sample(schedule):
    z0 = torch.randn(3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    for t in (0, 1, 250, 999, 1000):
        z_t = dc.q_sample(z0, t, eps, schedule)
        torch.testing.assert_close(dc.one_step_prediction(z_t, eps, t, schedule), z0, rtol=1e-6, atol=1e-9)
    bad = z0.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="t=5"):
        dc.one_step_prediction(bad, eps, 5, schedule)


def test_ddim_step_with_true_noise_lands_on_forward_process(schedule):
    z0 = torch.randn(3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    z_t = dc.q_sample(z0, 800, eps, schedule)
    torch.testing.assert_close(dc.ddim_step(z_t, eps, 800, 780, schedule), dc.q_sample(z0, 780, eps, schedule))
    torch.testing.assert_close(dc.ddim_step(z_t, eps, 800, 0, schedule), z0)
    with pytest.raises(OrderingError):
        dc.ddim_step(z_t, eps, 780, 800, schedule)
    with pytest.raises(OrderingError):
        dc.ddim_step(z_t, eps, 780, 780, schedule)


def test_inference_timesteps(schedule):
    ts = schedule.inference_timesteps(50)
    assert len(ts) == 51 and ts[0] == 1000 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert all(a - b == 20 for a, b in zip(ts, ts[1:]))


def test_cfg_combine():
    u, c = torch.randn(3, 4, 4), torch.randn(3, 4, 4)
    assert torch.equal(dc.cfg_combine(u, c, 1.0), c)
    assert torch.equal(dc.cfg_combine(u, c, 0.0), u)
    torch.testing.assert_close(dc.cfg_combine(u, c, 7.5), u + 7.5 * (c - u))


@given(st.floats(-20, 20, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_cfg_combine_affine(scale):
    g = torch.Generator().manual_seed(1)
    u, c = torch.randn(2, 3, generator=g, dtype=torch.float64), torch.randn(2, 3, generator=g, dtype=torch.float64)
    torch.testing.assert_close(dc.cfg_combine(u, c, scale), (1 - scale) * u + scale * c)


def test_blend_latents(schedule):
    z_gen = torch.randn(3, 8, 8, dtype=torch.float64)
    z0 = torch.randn_like(z_gen)
    eps = torch.randn_like(z_gen)
    mask = torch.zeros(8, 8, dtype=torch.float64)
    mask[2:5, 3:7] = 1
    out = dc.blend_latents(z_gen, z0, 300, mask, eps, schedule)
    known = dc.q_sample(z0, 300, eps, schedule)
    m = mask.bool()
    assert torch.equal(out[:, m], z_gen[:, m])
    assert torch.equal(out[:, ~m], known[:, ~m])
    # t = 0 puts the original back exactly
    assert torch.equal(dc.blend_latents(z_gen, z0, 0, mask, eps, schedule)[:, ~m], z0[:, ~m])
    with pytest.raises(MaskError):
        dc.blend_latents(z_gen, z0, 3, mask * 0.5, eps, schedule)
    with pytest.raises(ShapeError):
        dc.blend_latents(z_gen, z0, 3, torch.ones(4, 4), eps, schedule)


@given(st.integers(0, 1000), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_round_trip_property(t, seed):
    s = dc.make_schedule(1000)
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    rec = dc.one_step_prediction(dc.q_sample(z0, t, eps, s), eps, t, s)
    assert torch.allclose(rec, z0, rtol=1e-6, atol=1e-8)
