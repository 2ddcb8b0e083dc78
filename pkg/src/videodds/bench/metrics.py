"""Evaluation of an edit against its source video."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from ..diffcore import NULL
from ..tensorcore import ShapeError


class EmptyMaskError(ValueError):
    pass


def centroid_trajectory(m: torch.Tensor) -> torch.Tensor:
    """Per-frame mean (row, col) of the nonzero mask pixels, shape (N, 2), float64."""
    out = torch.empty(m.shape[0], 2, dtype=torch.float64)
    for k in range(m.shape[0]):
        rr, cc = torch.nonzero(m[k] > 0, as_tuple=True)
        if len(rr) == 0:
            raise EmptyMaskError(f"frame {k} has an empty mask")
        out[k, 0] = rr.double().mean()
        out[k, 1] = cc.double().mean()
    return out


def masked_mean_color(video: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    w = m[:, None].to(torch.float64)
    return (video.double() * w).sum(dim=(0, 2, 3)) / w.sum().clamp_min(1.0)


def segment(video: torch.Tensor, palette: list[torch.Tensor]) -> torch.Tensor:
    """Nearest-colour labelling; returns the mask of pixels not nearest to ``palette[0]``
    (the background)."""
    px = video.double().permute(0, 2, 3, 1)
    dist = torch.stack([(px - c.double()).norm(dim=-1) for c in palette])
    return (dist.argmin(0) != 0).to(video.dtype)


def frame_features(video: torch.Tensor, d=None) -> torch.Tensor:
    """One feature vector per frame: the denoiser's keys at t=1, or raw pixels."""
    if d is None:
        return video.reshape(video.shape[0], -1).double()
    with torch.no_grad():
        keys = d.extract_keys(video, 1, NULL)
    return keys.reshape(keys.shape[0], -1).double()


def frame_consistency(video: torch.Tensor, d=None) -> float:
    f = frame_features(video, d)
    if f.shape[0] < 2:
        return 1.0
    cos = torch.nn.functional.cosine_similarity(f[:-1], f[1:], dim=-1)
    return float(cos.mean())


@dataclass
class MetricReport:
    motion_dev_max: float
    motion_dev_mean: float
    in_mask_color_shift: float
    target_dist_before: float
    target_dist_after: float
    out_mask_mse: float
    frame_consistency: float

    def as_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, v = (p.strip() for p in line.split("=", 1))
                vals[k] = float(v)
        return cls(**vals)


def evaluate(
    original: torch.Tensor,
    edited: torch.Tensor,
    m: torch.Tensor,
    target_mean: torch.Tensor,
    d=None,
    gt_trajectory: torch.Tensor | None = None,
) -> MetricReport:
    """Score ``edited`` against ``original`` inside/outside mask ``m``.

    The background colour is the mean of the original outside the mask and
    the source object colour is the mean of the in-mask pixels that are far
    from it. Edited pixels are then labelled by nearest colour among
    (background, source, target); the centroid of the non-background label is
    compared with ``gt_trajectory`` (default: the same labelling of the
    original). A frame whose object vanishes scores an infinite deviation.
    """
    if original.shape != edited.shape:
        raise ShapeError(f"shape mismatch {tuple(original.shape)} vs {tuple(edited.shape)}")
    if m.shape != (original.shape[0], original.shape[2], original.shape[3]):
        raise ShapeError(f"mask {tuple(m.shape)} does not match video {tuple(original.shape)}")
    inside = m > 0
    outside = ~inside
    bg = masked_mean_color(original, outside.to(original.dtype))
    far = (original.double().permute(0, 2, 3, 1) - bg).norm(dim=-1)
    thresh = 0.5 * far[inside].max() if inside.any() else 0.0
    src = masked_mean_color(original, (inside & (far > thresh)).to(original.dtype))
    palette = [bg, src, target_mean.double()]

    if gt_trajectory is None:
        gt_trajectory = centroid_trajectory(segment(original, palette))
    try:
        traj = centroid_trajectory(segment(edited, palette))
        dev = (traj - gt_trajectory.double()).norm(dim=-1)
        dev_max, dev_mean = float(dev.max()), float(dev.mean())
    except EmptyMaskError:
        dev_max = dev_mean = math.inf

    mo = masked_mean_color(original, m)
    me = masked_mean_color(edited, m)
    tgt = target_mean.double()
    sq = (edited.double() - original.double()) ** 2
    n_out = outside.sum() * original.shape[1]
    out_mse = float((sq * outside[:, None]).sum() / n_out) if n_out else 0.0
    return MetricReport(
        motion_dev_max=dev_max,
        motion_dev_mean=dev_mean,
        in_mask_color_shift=float((me - mo).norm()),
        target_dist_before=float((mo - tgt).norm()),
        target_dist_after=float((me - tgt).norm()),
        out_mask_mse=out_mse,
        frame_consistency=frame_consistency(edited, d),
    )
