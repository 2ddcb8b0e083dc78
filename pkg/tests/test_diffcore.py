import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from videodds.bench.metrics import masked_mean_color, segment
from videodds.bench.synthetic import BACKGROUND, color_mean
from videodds.denoisers import AnalyticDenoiser, GaussianWorld
from videodds.diffcore import (
    NULL,
    ancestral_step,
    build_schedule,
    cfg_epsilon,
    condition,
    forward_noise,
    sample,
    schedule_from_betas,
)
from videodds.tensorcore import ShapeError

# Linear 1e-4..0.02 over 1000 steps, accumulated with plain Python floats.
GOLDEN_AB_1000 = 4.0358297653756754e-05


def test_two_step_schedule():
    s = schedule_from_betas([0.1, 0.2])
    assert torch.allclose(s.alpha_bar, torch.tensor([0.9, 0.72]))
    assert s.bt(1) == 0.0


def test_golden_alpha_bar_T1000():
    prod = 1.0
    for i in range(1000):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * i / 999)
    assert prod == pytest.approx(GOLDEN_AB_1000, rel=1e-12)
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.ab(1000) == pytest.approx(GOLDEN_AB_1000, rel=1e-6)


@pytest.mark.parametrize("T,lo,hi", [(100, 0.02, 0.15), (1000, 1e-4, 0.02), (2, 0.1, 0.2)])
def test_schedule_invariants(T, lo, hi):
    s = build_schedule(T, lo, hi)
    assert (s.beta[1:] > s.beta[:-1]).all()
    assert (s.alpha_bar[1:] < s.alpha_bar[:-1]).all()
    assert ((s.alpha_bar > 0) & (s.alpha_bar < 1)).all()
    assert s.bt(1) == 0.0
    assert (s.beta_tilde[1:] > 0).all() and (s.beta_tilde <= s.beta * (1 + 1e-6)).all()


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.2, 0.1), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_timestep_range(sched):
    with pytest.raises(ValueError):
        sched.ab(sched.T + 1)
    with pytest.raises(ValueError):
        forward_noise(torch.zeros(2), 0, torch.zeros(2), sched)
    assert sched.ab(0) == 1.0


def test_forward_noise_trivial_cases(sched):
    x0, eps = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    ab = sched.ab(30)
    assert torch.allclose(forward_noise(x0, 30, torch.zeros_like(x0), sched), ab**0.5 * x0)
    assert torch.allclose(forward_noise(torch.zeros_like(x0), 30, eps, sched), (1 - ab) ** 0.5 * eps)
    with pytest.raises(ShapeError):
        forward_noise(x0, 3, eps[:1], sched)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.integers(0, 10_000))
def test_forward_noise_inverts(t, seed):
    sched = build_schedule()
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    x_t = forward_noise(x0, t, eps, sched)
    ab = sched.ab(t)
    rec = (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
    assert float(((rec - eps).norm() / eps.norm())) < 1e-6


class Fixed:
    """Denoiser returning a preset prediction per condition."""

    differentiable = False

    def __init__(self, cond, uncond):
        self.cond, self.uncond = cond, uncond

    def predict_eps(self, x_t, t, y):
        return self.uncond if y.is_null else self.cond

    def extract_keys(self, x_t, t, y):
        raise NotImplementedError


def test_cfg_scalar_toy():
    d = Fixed(torch.tensor(1.0), torch.tensor(0.0))
    assert float(cfg_epsilon(d, torch.tensor(0.0), 1, condition("red square"), 9.0)) == 10.0


def test_cfg_w0_and_equal_branches():
    c = torch.randn(3)
    y = condition("red square")
    assert torch.equal(cfg_epsilon(Fixed(c, torch.randn(3)), c, 1, y, 0.0), c)
    assert torch.allclose(cfg_epsilon(Fixed(c, c.clone()), c, 1, y, 7.0), c)
    with pytest.raises(ValueError):
        cfg_epsilon(Fixed(c, c), c, 1, NULL, 1.0)


def test_cfg_affine_in_w():
    c, u = torch.randn(5), torch.randn(5)
    d = Fixed(c, u)
    y = condition("blue circle")
    for w in (0.5, 3.0, 9.0):
        assert torch.allclose(cfg_epsilon(d, c, 1, y, w), c + w * (c - u), atol=1e-6)


def test_ancestral_trivial(sched):
    x = torch.randn(3, 4)
    z = torch.zeros(3, 4)
    assert torch.allclose(ancestral_step(x, z, 40, sched, z), x / sched.a(40) ** 0.5)
    noise = torch.randn(3, 4)
    eps = torch.randn(3, 4)
    assert torch.equal(ancestral_step(x, eps, 1, sched, noise), ancestral_step(x, eps, 1, sched, z))
    with pytest.raises(ShapeError):
        ancestral_step(x, eps[:1], 3, sched, noise)
    with pytest.raises(ValueError):
        ancestral_step(x, eps, 3, sched, noise, noise_scale="half")


def test_ancestral_noise_scales(sched):
    x, eps, n = torch.randn(4), torch.randn(4), torch.randn(4)
    mean = ancestral_step(x, eps, 50, sched, torch.zeros(4))
    bt = sched.bt(50)
    assert torch.allclose(ancestral_step(x, eps, 50, sched, n) - mean, bt * n, atol=1e-6)
    assert torch.allclose(ancestral_step(x, eps, 50, sched, n, "sqrt") - mean, bt**0.5 * n, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 100), st.integers(0, 10_000))
def test_ancestral_step_with_true_noise_moves_closer(t, seed):
    sched = build_schedule()
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    x_t = forward_noise(x0, t, eps, sched)
    prev = ancestral_step(x_t, eps, t, sched, torch.zeros_like(x0))
    before = (x_t - sched.ab(t) ** 0.5 * x0).norm()
    after = (prev - sched.ab(t - 1) ** 0.5 * x0).norm()
    assert after < before


def test_sampler_mean_monte_carlo(sched):
    # 500 independent draws packed along the frame axis
    mu = torch.tensor([[0.3, -0.5], [0.8, 0.0]]).expand(500, 1, 2, 2).clone()
    world = GaussianWorld({"red square": mu}, sigma=0.5)
    d = AnalyticDenoiser(world, sched, patch=1, key_dim=1)
    x = sample(d, condition("red square"), 0.0, sched, mu.shape, seed=0).double()
    se = x.std(0) / math.sqrt(500)
    assert ((x.mean(0) - mu[0]).abs() < 3 * se).all()


def test_sampler_sigma_to_zero_hits_mean(sched):
    gen = torch.Generator().manual_seed(1)
    mu = {"red square": torch.randn(2, 3, 4, 4, generator=gen), "blue square": torch.randn(2, 3, 4, 4, generator=gen)}
    world = GaussianWorld(mu, sigma=1e-3)
    d = AnalyticDenoiser(world, sched)
    x = sample(d, condition("blue square"), 0.0, sched, (2, 3, 4, 4), seed=2)
    assert float((x - mu["blue square"]).abs().max()) < 0.05
    # guided, the delta-data predictor points at (1 + w) mu_y - w mu_null
    x = sample(d, condition("blue square"), 3.0, sched, (2, 3, 4, 4), seed=2)
    target = 4.0 * mu["blue square"] - 3.0 * world.mu[""]
    assert float((x - target).abs().max()) < 0.05


def test_sampler_is_seeded(sched, world):
    d = AnalyticDenoiser(world, sched)
    a = sample(d, condition("red square"), 2.0, sched, (2, 3, 4, 4), seed=5)
    b = sample(d, condition("red square"), 2.0, sched, (2, 3, 4, 4), seed=5)
    assert torch.equal(a, b)


def _object_color(x):
    palette = [torch.tensor(BACKGROUND)] + [color_mean(c) for c in ("red", "green", "blue")]
    return masked_mean_color(x, segment(x, palette)).float()


def test_trained_sampler_draws_the_caption_colour(pretrained):
    red, blue = color_mean("red"), color_mean("blue")
    s = pretrained.schedule()
    x = sample(pretrained, condition("red square"), 3.0, s, (8, 3, 32, 32), seed=0, noise_scale="sqrt")
    c = _object_color(x)
    assert (c - red).norm() < (c - blue).norm()
    # the default noise scale under-disperses: no object pixels survive, but
    # the frame mean still leans toward the caption colour
    x = sample(pretrained, condition("red square"), 3.0, s, (8, 3, 32, 32), seed=0)
    m = x.double().mean(dim=(0, 2, 3)).float()
    assert (m - red).norm() < (m - blue).norm()
