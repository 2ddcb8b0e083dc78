"""Quick invariant checks runnable from an installed copy (``videodds verify``)."""

from __future__ import annotations

import warnings
from typing import Callable

import torch

from .. import tensorcore as tc
from ..denoisers import AnalyticDenoiser, GaussianWorld, TinyVideoDenoiser, read_params
from ..diffcore import build_schedule, condition, forward_noise
from ..distill import dds_grad, draw_sample, mask_filter
from ..engine import EditConfig, edit
from ..selfsim import s_ssm_loss, ssm_step, t_ssm_loss
from .io import decode_mask, decode_video, encode_mask, encode_video
from .synthetic import gen_synthetic, standard_scene

Check = Callable[[], None]


def _world(shape=(4, 3, 8, 8)):
    gen = torch.Generator().manual_seed(0)
    mu = {c: torch.randn(shape, generator=gen) for c in ("red square", "blue square")}
    return GaussianWorld(mu, sigma=0.5)


def _schedule_invariants():
    s = build_schedule()
    assert (s.beta[1:] > s.beta[:-1]).all()
    assert (s.alpha_bar[1:] < s.alpha_bar[:-1]).all()
    assert s.bt(1) == 0.0
    assert ((s.beta_tilde >= 0) & (s.beta_tilde <= s.beta + 1e-7)).all()


def _dds_identity():
    sched = build_schedule()
    d = AnalyticDenoiser(_world(), sched, patch=4)
    x = torch.randn(4, 3, 8, 8)
    s = draw_sample(sched, torch.Generator().manual_seed(1), shape=x.shape)
    y = condition("blue square")
    assert torch.equal(dds_grad(d, x, y, x.clone(), y, 9.0, s, sched), torch.zeros_like(x))


def _ssm_zero_at_reference():
    sched = build_schedule()
    d = TinyVideoDenoiser(height=16, width=16, sched=sched)
    x = torch.randn(4, 3, 16, 16)
    s = draw_sample(sched, torch.Generator().manual_seed(2), shape=x.shape)
    r = ssm_step(x, x.clone(), s, d, sched, 1.0, 1.0)
    assert r.loss_s == 0.0 and r.loss_t == 0.0
    assert float(r.grad.abs().max()) <= 1e-6
    k = torch.randn(4, 6, 5)
    assert float(s_ssm_loss(k, k)) == 0.0 and float(t_ssm_loss(k, k)) == 0.0


def _mask_filter_zero_outside():
    g = torch.randn(3, 2, 5, 5)
    m = (torch.rand(3, 5, 5, generator=torch.Generator().manual_seed(3)) > 0.5).float()
    out = mask_filter(g, m)
    assert torch.equal(out[(m == 0)[:, None].expand_as(out)], torch.zeros(int((m == 0).sum()) * 2))


def _zero_step_identity():
    sched = build_schedule()
    video, mask, _ = gen_synthetic(standard_scene(frames=4, height=16, width=16))
    d = TinyVideoDenoiser(height=16, width=16, sched=sched)
    out, trace = edit(video, condition("red square"), condition("blue square"), mask, EditConfig(steps=0), d, sched)
    assert torch.equal(out, video) and trace == []


def _cosine_gradient():
    gen = torch.Generator().manual_seed(4)
    ref = torch.randn(2, 5, 3, generator=gen, dtype=torch.float64)
    x = torch.randn(2, 5, 3, generator=gen, dtype=torch.float64)
    err = tc.grad_check(lambda k: s_ssm_loss(k, ref), x)
    assert err < 1e-3, err


def _containers_round_trip():
    v = torch.randn(3, 3, 7, 5)
    assert torch.equal(decode_video(encode_video(v)), v)
    m = (torch.rand(3, 7, 5) > 0.5).float()
    assert torch.equal(decode_mask(encode_mask(m)), m)


def _params_round_trip():
    import tempfile
    from pathlib import Path

    from ..denoisers import save_params

    d = TinyVideoDenoiser(height=8, width=8)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "p.dmp"
        save_params(d, p)
        state = read_params(p.read_bytes())
    for k, v in d.state_dict().items():
        assert torch.equal(state[k], v.float()), k


def _forward_noise_endpoints():
    sched = build_schedule()
    x = torch.randn(2, 3, 4, 4)
    eps = torch.randn_like(x)
    ab = sched.ab(1)
    assert torch.allclose(forward_noise(x, 1, eps, sched), ab**0.5 * x + (1 - ab) ** 0.5 * eps, atol=1e-6)


CHECKS: list[tuple[str, Check]] = [
    ("schedule invariants", _schedule_invariants),
    ("dds zero on identical branches", _dds_identity),
    ("self-similarity zero at the reference", _ssm_zero_at_reference),
    ("mask filter zero outside mask", _mask_filter_zero_outside),
    ("zero-step edit is the identity", _zero_step_identity),
    ("s-ssm gradient matches finite differences", _cosine_gradient),
    ("video and mask containers round-trip", _containers_round_trip),
    ("params container round-trips", _params_round_trip),
    ("forward noising at t=1", _forward_noise_endpoints),
]


def run_checks(emit=print) -> int:
    """Run every check, emit one line each, return the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fn()
        except Exception as exc:  # report and keep going
            failures += 1
            emit(f"FAIL {name}: {type(exc).__name__}: {exc}")
        else:
            emit(f"PASS {name}")
    return failures
