"""Synthetic moving-shape videos with exact masks and known trajectories.

Coordinates are (row, col) in pixel-index units; a shape centred at
(r, c) covers the pixels whose centres fall inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..diffcore import COLOR_WORDS, SHAPE_WORDS
from ..tensorcore import DTYPE

COLOR_MEANS = {
    "red": (0.9, -0.7, -0.7),
    "green": (-0.7, 0.9, -0.7),
    "blue": (-0.7, -0.7, 0.9),
}
BACKGROUND = (-0.2, -0.2, -0.2)
# Static background grain of the standard scene. Flat patches give the key
# tap nothing but noise to describe, so some texture is needed for
# self-similarity to carry structure.
STANDARD_TEXTURE = 0.1
# Box-mask margin at 32x32, in pixels.
STANDARD_PAD = 2


def color_mean(name: str) -> torch.Tensor:
    return torch.tensor(COLOR_MEANS[name], dtype=DTYPE)


@dataclass
class SceneSpec:
    shape: str = "circle"
    size: float = 10.0
    color: str = "red"
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    background: tuple[float, float, float] = BACKGROUND
    frames: int = 8
    height: int = 32
    width: int = 32
    texture: float = 0.0

    @property
    def caption(self) -> str:
        return f"{self.color} {self.shape}"

    def validate(self) -> None:
        if self.shape not in SHAPE_WORDS:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLOR_WORDS:
            raise ValueError(f"unknown color {self.color!r}")
        if len(self.trajectory) != self.frames:
            raise ValueError(f"trajectory has {len(self.trajectory)} points for {self.frames} frames")
        half = self.size / 2
        for k, (r, c) in enumerate(self.trajectory):
            if r - half < -0.5 or c - half < -0.5 or r + half > self.height - 0.5 or c + half > self.width - 0.5:
                raise ValueError(f"shape leaves the frame at frame {k} (centre {r}, {c})")


def linear_trajectory(start, velocity, frames: int) -> list[tuple[float, float]]:
    return [(start[0] + k * velocity[0], start[1] + k * velocity[1]) for k in range(frames)]


def shape_mask(kind: str, size: float, center, height: int, width: int) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    dr, dc = rows - center[0], cols - center[1]
    half = size / 2
    if kind == "square":
        return (np.abs(dr) < half) & (np.abs(dc) < half)
    return dr**2 + dc**2 <= half**2


def gen_synthetic(spec: SceneSpec, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor, str]:
    """Render ``spec`` into (video (N,3,H,W), mask (N,H,W), caption)."""
    spec.validate()
    n, h, w = spec.frames, spec.height, spec.width
    rng = np.random.default_rng(seed)
    bg = np.asarray(spec.background, dtype=np.float64)[:, None, None]
    fg = np.asarray(COLOR_MEANS[spec.color], dtype=np.float64)[:, None, None]
    video = np.empty((n, 3, h, w))
    masks = np.empty((n, h, w))
    tex = spec.texture * rng.standard_normal((3, h, w)) if spec.texture else 0.0
    for k, center in enumerate(spec.trajectory):
        m = shape_mask(spec.shape, spec.size, center, h, w)
        video[k] = np.where(m[None], fg, bg + tex)
        masks[k] = m
    return torch.from_numpy(video).to(DTYPE), torch.from_numpy(masks).to(DTYPE), spec.caption


def box_masks(mask: torch.Tensor, pad: int = 2, jitter: int = 0, seed: int = 0) -> torch.Tensor:
    """Detector-style boxes: per-frame bounding box of ``mask`` grown by
    ``pad`` plus a random 0..``jitter`` pixels on each side."""
    rng = np.random.default_rng(seed)
    n, h, w = mask.shape
    out = torch.zeros_like(mask)
    for k in range(n):
        rr, cc = torch.nonzero(mask[k] > 0, as_tuple=True)
        if len(rr) == 0:
            continue
        extra = rng.integers(0, jitter + 1, size=4) if jitter else np.zeros(4, dtype=int)
        r0 = max(int(rr.min()) - pad - int(extra[0]), 0)
        r1 = min(int(rr.max()) + pad + int(extra[1]), h - 1)
        c0 = max(int(cc.min()) - pad - int(extra[2]), 0)
        c1 = min(int(cc.max()) + pad + int(extra[3]), w - 1)
        out[k, r0 : r1 + 1, c0 : c1 + 1] = 1.0
    return out


def standard_scene(
    frames: int = 8,
    height: int = 32,
    width: int = 32,
    color: str = "red",
    shape: str = "square",
    texture: float = STANDARD_TEXTURE,
) -> SceneSpec:
    """The reference editing scene: a shape drifting diagonally across the frame.

    Geometry scales with the frame so the hi-res cascade variant is the same
    scene at twice the resolution and frame rate.
    """
    s = height / 32
    ft = (frames - 1) / 7 if frames > 1 else 1.0
    start = (11.0 * s, 9.0 * s)
    step = (1.0 * s / ft, 2.0 * s / ft)
    return SceneSpec(
        shape=shape,
        size=10.0 * s,
        color=color,
        trajectory=linear_trajectory(start, step, frames),
        frames=frames,
        height=height,
        width=width,
        texture=texture,
    )


def standard_example(frames: int = 8, height: int = 32, width: int = 32, seed: int = 0):
    """The standard scene rendered with its box masks.

    Returns (video, object_mask, box_mask, caption). The box margin scales
    with the frame so the hi-res variant uses the same boxes.
    """
    spec = standard_scene(frames, height, width)
    video, mask, caption = gen_synthetic(spec, seed)
    pad = int(round(STANDARD_PAD * height / 32))
    return video, mask, box_masks(mask, pad=pad), caption


def random_scene(
    rng: np.random.Generator, frames: int = 8, height: int = 32, width: int = 32, texture_max: float = 0.0
) -> SceneSpec:
    # sizes and speeds are quoted for 32x32 and scale with the smaller side
    scale = min(height, width) / 32
    size = float(rng.integers(7, 13)) * scale
    half = size / 2
    lo, hi_r, hi_c = half - 0.5, height - 0.5 - half, width - 0.5 - half
    while True:
        v = rng.uniform(-2.0, 2.0, size=2) * scale
        start = rng.uniform([lo, lo], [hi_r, hi_c])
        end = start + v * (frames - 1)
        if lo <= end[0] <= hi_r and lo <= end[1] <= hi_c:
            break
    texture = float(rng.uniform(0.0, texture_max)) if texture_max > 0 else 0.0
    return SceneSpec(
        texture=texture,
        shape=str(rng.choice(SHAPE_WORDS)),
        size=size,
        color=str(rng.choice(COLOR_WORDS)),
        trajectory=linear_trajectory(tuple(start), tuple(v), frames),
        frames=frames,
        height=height,
        width=width,
    )


def training_set(
    count: int, seed: int = 0, frames: int = 8, height: int = 32, width: int = 32, texture_max: float = 0.2
):
    """``count`` random scenes as a (M, N, 3, H, W) tensor plus captions.

    Background texture amplitude is drawn uniformly from ``[0, texture_max]``.
    """
    rng = np.random.default_rng(seed)
    videos, captions = [], []
    for i in range(count):
        spec = random_scene(rng, frames, height, width, texture_max)
        v, _, cap = gen_synthetic(spec, seed=i)
        videos.append(v)
        captions.append(cap)
    return torch.stack(videos), captions
