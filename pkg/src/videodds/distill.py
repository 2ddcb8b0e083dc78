"""Score-distillation gradients (SDS, DDS, video DDS) and mask filtering.

None of these backpropagate through the denoiser: the gradient handed to the
pixels is the (guided) epsilon residual itself, with unit timestep weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .denoisers import Denoiser
from .diffcore import Condition, NoiseSchedule, cfg_epsilon, forward_noise
from .tensorcore import DTYPE, ShapeError

T_RANGE = (0.05, 0.95)


@dataclass(frozen=True)
class DistillSample:
    """One shared draw of timestep and noise. ``eps_ref`` is set only when
    the reference branch gets independent noise."""

    t: int
    eps: torch.Tensor
    eps_ref: torch.Tensor | None = None

    @property
    def ref_noise(self) -> torch.Tensor:
        return self.eps if self.eps_ref is None else self.eps_ref


def draw_sample(
    sched: NoiseSchedule,
    gen: torch.Generator,
    t_min_frac: float = T_RANGE[0],
    t_max_frac: float = T_RANGE[1],
    shape=(),
    share_eps: bool = True,
) -> DistillSample:
    """t = round(u * T) clamped to [1, T] with u ~ U(t_min_frac, t_max_frac)."""
    if not 0 <= t_min_frac < t_max_frac <= 1:
        raise ValueError(f"need 0 <= t_min < t_max <= 1, got ({t_min_frac}, {t_max_frac})")
    u = t_min_frac + (t_max_frac - t_min_frac) * torch.rand((), generator=gen, dtype=torch.float64).item()
    t = min(max(int(round(u * sched.T)), 1), sched.T)
    eps = torch.randn(tuple(shape), generator=gen, dtype=DTYPE)
    eps_ref = None if share_eps else torch.randn(tuple(shape), generator=gen, dtype=DTYPE)
    return DistillSample(t, eps, eps_ref)


def _check_pair(x: torch.Tensor, x_ref: torch.Tensor) -> None:
    if x.shape != x_ref.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_ref.shape)}")


@torch.no_grad()
def sds_grad(
    d: Denoiser, x: torch.Tensor, y: Condition, w: float, s: DistillSample, sched: NoiseSchedule
) -> torch.Tensor:
    x_t = forward_noise(x, s.t, s.eps, sched)
    return cfg_epsilon(d, x_t, s.t, y, w) - s.eps


@torch.no_grad()
def dds_grad(
    d: Denoiser,
    x: torch.Tensor,
    y: Condition,
    x_ref: torch.Tensor,
    y_ref: Condition,
    w: float,
    s: DistillSample,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """eps^w(x_t, y) - eps^w(x_ref_t, y_ref); the noise terms cancel."""
    _check_pair(x, x_ref)
    x_t = forward_noise(x, s.t, s.eps, sched)
    ref_t = forward_noise(x_ref, s.t, s.ref_noise, sched)
    return cfg_epsilon(d, x_t, s.t, y, w) - cfg_epsilon(d, ref_t, s.t, y_ref, w)


def vdds_grad(d, x, y, x_ref, y_ref, w, s, sched) -> torch.Tensor:
    """Video DDS: the denoiser sees all N frames of each branch at once."""
    if x.dim() != 4:
        raise ShapeError(f"expected a video (N, C, H, W), got {tuple(x.shape)}")
    return dds_grad(d, x, y, x_ref, y_ref, w, s, sched)


def mask_filter(grad: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Zero the gradient outside the per-frame masks (N, H, W), broadcast over channels."""
    if grad.dim() != 4 or m.shape != (grad.shape[0], grad.shape[2], grad.shape[3]):
        raise ShapeError(f"mask {tuple(m.shape)} does not match video {tuple(grad.shape)}")
    return grad * m[:, None].to(grad.dtype)


def framewise_dds_grad(d, x, y, x_ref, y_ref, w, s, sched) -> torch.Tensor:
    """Image DDS applied to each frame on its own (no cross-frame context)."""
    _check_pair(x, x_ref)
    frames = []
    for n in range(x.shape[0]):
        sub = DistillSample(
            s.t, s.eps[n : n + 1], None if s.eps_ref is None else s.eps_ref[n : n + 1]
        )
        frames.append(dds_grad(d, x[n : n + 1], y, x_ref[n : n + 1], y_ref, w, sub, sched))
    return torch.cat(frames)
