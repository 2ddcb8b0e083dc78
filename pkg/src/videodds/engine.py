"""The editing loop: masked video DDS plus self-similarity regularisation.

Plain SGD on the pixel array, initialised at the source video. Each step
draws one (t, eps) pair that is shared by the distillation gradient and both
self-similarity losses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .denoisers import Denoiser
from .diffcore import Condition, NoiseSchedule, condition
from .distill import T_RANGE, draw_sample, mask_filter, vdds_grad
from .selfsim import ssm_step
from .tensorcore import ShapeError

log = logging.getLogger(__name__)


@dataclass
class EditConfig:
    """Edit-loop settings.

    ``lambda_t`` is large because frame-mean keys barely change between
    frames, so the raw temporal loss sits about three orders of magnitude
    below the spatial one. ``mask_ssm`` restricts the self-similarity
    gradient to the mask as well; unmasked, most of it lands on the
    background and drifts it.
    """

    steps: int = 200
    lr: float = 0.4
    w: float = 9.0
    lambda_s: float = 0.3
    lambda_t: float = 1000.0
    t_range: tuple[float, float] = T_RANGE
    seed: int = 0
    mask_vdds: bool = True
    share_eps: bool = True
    mask_ssm: bool = True
    grad_weight: float = 1.0
    key_caption: str = ""

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        lo, hi = self.t_range
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"invalid t_range {self.t_range}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class TraceRow:
    step: int
    t: int
    grad_norm_vdds: float
    loss_sssm: float
    loss_tssm: float


@dataclass
class EditState:
    x: torch.Tensor
    x_ref: torch.Tensor
    step: int = 0
    trace: list[TraceRow] = field(default_factory=list)

    @classmethod
    def start(cls, video: torch.Tensor) -> "EditState":
        ref = video.detach().clone()
        return cls(x=ref.clone(), x_ref=ref)


class EditDiverged(FloatingPointError):
    def __init__(self, message: str, trace: list[TraceRow]):
        super().__init__(message)
        self.trace = trace


def _check_mask(m: torch.Tensor, x: torch.Tensor) -> None:
    if m.shape != (x.shape[0], x.shape[2], x.shape[3]):
        raise ShapeError(f"mask {tuple(m.shape)} does not match video {tuple(x.shape)}")


def edit_step(
    state: EditState,
    d: Denoiser,
    y: Condition,
    y_ref: Condition,
    m: torch.Tensor,
    cfg: EditConfig,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> EditState:
    x, x_ref = state.x, state.x_ref
    _check_mask(m, x)
    s = draw_sample(sched, gen, *cfg.t_range, shape=x.shape, share_eps=cfg.share_eps)

    g_v = cfg.grad_weight * vdds_grad(d, x, y, x_ref, y_ref, cfg.w, s, sched)
    if cfg.mask_vdds:
        g_v = mask_filter(g_v, m)
    ssm = ssm_step(x, x_ref, s, d, sched, cfg.lambda_s, cfg.lambda_t, condition(cfg.key_caption))
    g_s = mask_filter(ssm.grad, m) if cfg.mask_ssm else ssm.grad

    g = g_v + g_s
    row = TraceRow(state.step + 1, s.t, float(g_v.norm()), ssm.loss_s, ssm.loss_t)
    trace = state.trace + [row]
    if not torch.isfinite(g).all():
        raise EditDiverged(f"non-finite gradient at step {row.step} (t={s.t})", trace)
    return EditState(x=x - cfg.lr * g, x_ref=x_ref, step=row.step, trace=trace)


def edit(
    video: torch.Tensor,
    y_ref: Condition,
    y: Condition,
    m: torch.Tensor,
    cfg: EditConfig,
    d: Denoiser,
    sched: NoiseSchedule,
) -> tuple[torch.Tensor, list[TraceRow]]:
    """Run ``cfg.steps`` edit steps starting from ``video``."""
    gen = torch.Generator().manual_seed(cfg.seed)
    state = EditState.start(video)
    for _ in range(cfg.steps):
        state = edit_step(state, d, y, y_ref, m, cfg, sched, gen)
        if state.step % 50 == 0:
            r = state.trace[-1]
            log.info("step %d t=%d |g_vdds|=%.3f Ls=%.4f Lt=%.4f", r.step, r.t, r.grad_norm_vdds, r.loss_sssm, r.loss_tssm)
    return state.x, state.trace


# -- cascade stand-ins ----------------------------------------------------------


def _factor(factor: int) -> None:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")


def temporal_interpolate(video: torch.Tensor, factor: int) -> torch.Tensor:
    """Insert ``factor - 1`` linearly blended frames between each neighbour pair."""
    _factor(factor)
    if factor == 1:
        return video.clone()
    out = []
    for n in range(video.shape[0] - 1):
        a, b = video[n], video[n + 1]
        for k in range(factor):
            f = k / factor
            out.append(a if k == 0 else (1 - f) * a + f * b)
    out.append(video[-1])
    return torch.stack(out)


def spatial_upsample(video: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear upsampling with half-pixel centres and clamped edges."""
    _factor(factor)
    if factor == 1:
        return video.clone()
    return F.interpolate(video, scale_factor=factor, mode="bilinear", align_corners=False)


def box_downsample(video: torch.Tensor, factor: int) -> torch.Tensor:
    _factor(factor)
    if video.shape[-1] % factor or video.shape[-2] % factor:
        raise ShapeError(f"frame {tuple(video.shape[-2:])} not divisible by {factor}")
    if factor == 1:
        return video.clone()
    return F.avg_pool2d(video, factor)


def mask_downsample(m: torch.Tensor, factor: int) -> torch.Tensor:
    """Max-pool so that the coarse mask still covers every masked pixel."""
    _factor(factor)
    if m.shape[-1] % factor or m.shape[-2] % factor:
        raise ShapeError(f"mask {tuple(m.shape[-2:])} not divisible by {factor}")
    if factor == 1:
        return m.clone()
    return F.max_pool2d(m[:, None].float(), factor)[:, 0]


def to_keyframes(video: torch.Tensor, m: torch.Tensor, spatial: int, temporal: int):
    _factor(temporal)
    if (video.shape[0] - 1) % temporal:
        raise ShapeError(f"{video.shape[0]} frames cannot be a {temporal}x interpolation of keyframes")
    return box_downsample(video[::temporal], spatial), mask_downsample(m[::temporal], spatial)


def expand_keyframes(keys: torch.Tensor, spatial: int, temporal: int) -> torch.Tensor:
    return spatial_upsample(temporal_interpolate(keys, temporal), spatial)


def cascade_edit(
    video_hi: torch.Tensor,
    y_ref: Condition,
    y: Condition,
    m_hi: torch.Tensor,
    cfg: EditConfig,
    d_key: Denoiser,
    sched: NoiseSchedule,
    spatial: int = 2,
    temporal: int = 2,
) -> tuple[torch.Tensor, list[TraceRow]]:
    """Edit only the keyframes, then expand them with the fixed resamplers.

    Outside ``m_hi`` the result is the expanded *unedited* keyframes, so the
    resamplers cannot carry edited colour across the mask boundary (temporal
    blending would otherwise ghost the object between keyframe positions).
    With ``steps=0`` the output is the plain resampling round trip.
    """
    key, m_key = to_keyframes(video_hi, m_hi, spatial, temporal)
    edited, trace = edit(key, y_ref, y, m_key, cfg, d_key, sched)
    base = expand_keyframes(key, spatial, temporal)
    out = expand_keyframes(edited, spatial, temporal)
    keep = (m_hi > 0)[:, None]
    return torch.where(keep, out, base), trace


def cascade_baseline(video_hi: torch.Tensor, spatial: int = 2, temporal: int = 2) -> torch.Tensor:
    """What :func:`cascade_edit` returns with zero steps."""
    key, _ = to_keyframes(video_hi, torch.ones_like(video_hi[:, 0]), spatial, temporal)
    return expand_keyframes(key, spatial, temporal)
