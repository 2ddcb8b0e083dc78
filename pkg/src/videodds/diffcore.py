"""Noise schedule, forward noising, classifier-free guidance and ancestral sampling.

Videos are float32 tensors of shape (N, C, H, W). Timesteps are 1-based
integers in ``[1, T]``; index ``t - 1`` into the schedule arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch

from .tensorcore import DTYPE, ShapeError

if TYPE_CHECKING:
    from .denoisers import Denoiser

DEFAULT_T = 100
# Linear betas for T=100. The small end keeps sqrt(ab/(1-ab)) near 3 at
# t=5, so an SGD step of 0.4 on a distillation residual does not overshoot.
DEFAULT_BETA_MIN = 0.02
DEFAULT_BETA_MAX = 0.15


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    beta_tilde: torch.Tensor

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t - 1

    def ab(self, t: int) -> float:
        """alpha_bar at timestep t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check(t)])

    def a(self, t: int) -> float:
        return float(self.alpha[self._check(t)])

    def b(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def bt(self, t: int) -> float:
        return float(self.beta_tilde[self._check(t)])


def schedule_from_betas(beta) -> NoiseSchedule:
    # Products are accumulated in float64 and stored as float32.
    beta = torch.as_tensor(beta, dtype=torch.float64)
    if beta.dim() != 1 or len(beta) < 2:
        raise ValueError("need at least two betas")
    if not ((beta > 0) & (beta < 1)).all():
        raise ValueError("betas must lie in (0, 1)")
    if not (beta[1:] > beta[:-1]).all():
        raise ValueError("betas must be strictly increasing")
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(
        T=len(beta),
        beta=beta.to(DTYPE),
        alpha=alpha.to(DTYPE),
        alpha_bar=alpha_bar.to(DTYPE),
        beta_tilde=beta_tilde.to(DTYPE),
    )


def build_schedule(
    T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_min < beta_max < 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    return schedule_from_betas(torch.linspace(beta_min, beta_max, T, dtype=torch.float64))


@dataclass(frozen=True)
class Condition:
    id: str
    embedding: torch.Tensor = field(repr=False)
    is_null: bool = False

    def __post_init__(self):
        if self.is_null and bool(self.embedding.abs().sum() != 0):
            raise ValueError("null condition must carry the all-zero embedding")


COLOR_WORDS = ("red", "green", "blue")
SHAPE_WORDS = ("square", "circle")
EMBED_DIM = 8


def condition(caption: str) -> Condition:
    """Look up the fixed embedding of a caption such as ``"red circle"``.

    The embedding is a one-hot color block followed by a one-hot shape block,
    zero padded to ``EMBED_DIM``. The empty caption is the null condition.
    """
    if caption == "":
        return NULL
    words = caption.split()
    if len(words) != 2 or words[0] not in COLOR_WORDS or words[1] not in SHAPE_WORDS:
        raise KeyError(f"unknown caption {caption!r}")
    emb = torch.zeros(EMBED_DIM, dtype=DTYPE)
    emb[COLOR_WORDS.index(words[0])] = 1.0
    emb[len(COLOR_WORDS) + SHAPE_WORDS.index(words[1])] = 1.0
    return Condition(caption, emb)


NULL = Condition("", torch.zeros(EMBED_DIM, dtype=DTYPE), is_null=True)


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_noise: shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    sched._check(t)
    ab = sched.ab(t)
    return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * eps


def cfg_epsilon(d: Denoiser, x_t: torch.Tensor, t: int, y: Condition, w: float) -> torch.Tensor:
    """Guided prediction (1 + w) * eps(x_t, y) - w * eps(x_t, null)."""
    if y.is_null:
        raise ValueError("cfg_epsilon needs a non-null condition; use w=0 for plain prediction")
    cond = d.predict_eps(x_t, t, y)
    if w == 0:
        return cond
    uncond = d.predict_eps(x_t, t, NULL)
    return (1.0 + w) * cond - w * uncond


NOISE_SCALES = ("beta_tilde", "sqrt")


def ancestral_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    noise_scale: str = "beta_tilde",
) -> torch.Tensor:
    """One reverse step x_t -> x_{t-1}.

    The stochastic term is ``beta_tilde_t * noise`` by default. That injects
    far less variance than the posterior has, so samples drift toward the
    conditional mean; ``noise_scale="sqrt"`` uses ``sqrt(beta_tilde_t)``,
    the usual DDPM choice. Either way the last step (beta_tilde_1 = 0) is
    deterministic.
    """
    if noise_scale not in NOISE_SCALES:
        raise ValueError(f"noise_scale must be one of {NOISE_SCALES}, got {noise_scale!r}")
    if x_t.shape != eps_pred.shape or x_t.shape != noise.shape:
        raise ShapeError(
            f"ancestral_step: shape mismatch {tuple(x_t.shape)} vs "
            f"{tuple(eps_pred.shape)} vs {tuple(noise.shape)}"
        )
    a, ab, bt = sched.a(t), sched.ab(t), sched.bt(t)
    mean = (x_t - (1.0 - a) / (1.0 - ab) ** 0.5 * eps_pred) / a**0.5
    sigma = bt if noise_scale == "beta_tilde" else bt**0.5
    return mean + sigma * noise


@torch.no_grad()
def sample(
    d: Denoiser,
    y: Condition,
    w: float,
    sched: NoiseSchedule,
    shape,
    seed: int,
    noise_scale: str = "beta_tilde",
) -> torch.Tensor:
    """Ancestral sampling from pure noise with guidance scale ``w``."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(shape), generator=gen, dtype=DTYPE)
    for t in range(sched.T, 0, -1):
        eps = cfg_epsilon(d, x, t, y, w)
        noise = torch.randn(tuple(shape), generator=gen, dtype=DTYPE)
        x = ancestral_step(x, eps, t, sched, noise, noise_scale)
    if not torch.isfinite(x).all():
        raise FloatingPointError("sampler produced non-finite values")
    return x
