"""Spatial and temporal self-similarity of key features, and the matching losses.

Keys are tensors of shape (N, tokens, C). Spatial self-similarity compares
token pairs inside each frame; temporal self-similarity compares the
per-frame token means across frames.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from . import tensorcore as tc
from .denoisers import Denoiser, NotDifferentiableError, check_keys
from .diffcore import NULL, Condition, NoiseSchedule, forward_noise
from .distill import DistillSample
from .tensorcore import ShapeError


class DegenerateTokenWarning(RuntimeWarning):
    pass


def _warn_zero_rows(rows: torch.Tensor, what: str) -> None:
    if bool(((rows * rows).sum(-1) == 0).any()):
        warnings.warn(f"zero-norm {what}; treated as orthogonal to all others", DegenerateTokenWarning, stacklevel=3)


def spatial_selfsim(keys: torch.Tensor) -> torch.Tensor:
    """Per-frame token cosine matrices, shape (N, tokens, tokens)."""
    check_keys(keys)
    _warn_zero_rows(keys, "key token")
    return tc.cosine_matrix(keys)


def _pair(kx: torch.Tensor, kr: torch.Tensor) -> None:
    if kx.shape != kr.shape:
        raise ShapeError(f"key shapes differ: {tuple(kx.shape)} vs {tuple(kr.shape)}")


def s_ssm_loss(kx: torch.Tensor, kr: torch.Tensor) -> torch.Tensor:
    """Frame-averaged squared Frobenius distance between spatial self-similarities."""
    _pair(kx, kr)
    diff = tc.sub(spatial_selfsim(kx), spatial_selfsim(kr))
    return tc.sum(tc.square(diff)) / kx.shape[0]


def spatial_marginal_mean(keys: torch.Tensor) -> torch.Tensor:
    """Mean over tokens: (N, tokens, C) -> (N, C)."""
    return tc.mean(keys, axis=1)


def temporal_selfsim(keys: torch.Tensor) -> torch.Tensor:
    check_keys(keys)
    if keys.shape[0] < 2:
        raise ShapeError("temporal self-similarity needs at least 2 frames")
    m = spatial_marginal_mean(keys)
    _warn_zero_rows(m, "frame mean")
    return tc.cosine_matrix(m)


def t_ssm_loss(kx: torch.Tensor, kr: torch.Tensor) -> torch.Tensor:
    _pair(kx, kr)
    diff = tc.sub(temporal_selfsim(kx), temporal_selfsim(kr))
    return tc.sum(tc.square(diff))


@dataclass(frozen=True)
class SSMResult:
    grad: torch.Tensor
    loss_s: float
    loss_t: float


def ssm_step(
    x: torch.Tensor,
    x_ref: torch.Tensor,
    s: DistillSample,
    d: Denoiser,
    sched: NoiseSchedule,
    lambda_s: float = 1.0,
    lambda_t: float = 1.0,
    key_cond: Condition = NULL,
) -> SSMResult:
    """Gradient of ``lambda_s * L_spatial + lambda_t * L_temporal`` w.r.t. ``x``.

    Both videos are noised with the same ``s.eps`` at ``s.t`` and keyed under
    the same condition, so the loss and its gradient vanish at ``x == x_ref``.
    The reference branch is a constant.
    """
    if not d.differentiable:
        raise NotDifferentiableError("self-similarity gradients need a differentiable key tap")
    if x.shape != x_ref.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_ref.shape)}")
    if lambda_s == 0 and lambda_t == 0:
        return SSMResult(torch.zeros_like(x), 0.0, 0.0)

    with torch.no_grad():
        k_ref = d.extract_keys(forward_noise(x_ref, s.t, s.eps, sched), s.t, key_cond)
    with torch.enable_grad():
        xv = x.detach().clone().requires_grad_(True)
        k_x = d.extract_keys(forward_noise(xv, s.t, s.eps, sched), s.t, key_cond)
        ls = s_ssm_loss(k_x, k_ref) if lambda_s else torch.zeros(())
        lt = t_ssm_loss(k_x, k_ref) if lambda_t and x.shape[0] > 1 else torch.zeros(())
        total = lambda_s * ls + lambda_t * lt
        if not total.requires_grad:
            return SSMResult(torch.zeros_like(x), float(ls), float(lt))
        (g,) = tc.backward(total, [xv])
    return SSMResult(g.detach(), float(ls.detach()), float(lt.detach()))


def ssm_grads(x, x_ref, s, d, y, y_ref, sched, lambda_s=1.0, lambda_t=1.0, key_cond: Condition = NULL):
    """Gradient of the combined self-similarity loss.

    ``y`` and ``y_ref`` are accepted for call-site symmetry with the
    distillation gradients; keys for both branches use ``key_cond``.
    """
    return ssm_step(x, x_ref, s, d, sched, lambda_s, lambda_t, key_cond).grad
