"""Noise predictors with an attention-key feature tap.

Two families share the :class:`Denoiser` protocol:

* :class:`AnalyticDenoiser` is the exact minimum-MSE epsilon predictor for
  Gaussian data ``N(mu_y, sigma^2 I)``; its keys are a fixed linear map of
  pixel patches. It exists so that the distillation maths can be checked
  against closed forms.
* :class:`TinyVideoDenoiser` is a small trainable text-conditioned video
  transformer (patchify, spatial attention, temporal attention, head). Its
  keys are the key projection of the spatial attention block.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._binio import ContainerError, Reader
from .diffcore import EMBED_DIM, Condition, NoiseSchedule, build_schedule, condition, schedule_from_betas
from .tensorcore import DTYPE, ShapeError

log = logging.getLogger(__name__)

PARAMS_MAGIC = b"DMP1"


class Denoiser(Protocol):
    differentiable: bool

    def predict_eps(self, x_t: torch.Tensor, t: int, y: Condition) -> torch.Tensor: ...

    def extract_keys(self, x_t: torch.Tensor, t: int, y: Condition) -> torch.Tensor: ...


class NotDifferentiableError(RuntimeError):
    pass


def check_keys(keys: torch.Tensor) -> torch.Tensor:
    """Validate a KeyFeatures tensor of shape (N, tokens, channels)."""
    if keys.dim() != 3:
        raise ShapeError(f"key features must be (N, tokens, C), got {tuple(keys.shape)}")
    if keys.shape[1] < 2:
        raise ShapeError(f"key features need >= 2 tokens, got {keys.shape[1]}")
    if not torch.isfinite(keys).all():
        raise FloatingPointError("non-finite key features")
    return keys


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., (H/p)*(W/p), C*p*p), tokens in row-major order."""
    *lead, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide frame {h}x{w}")
    x = x.reshape(*lead, c, h // p, p, w // p, p)
    nd = len(lead)
    perm = list(range(nd)) + [nd + 1, nd + 3, nd, nd + 2, nd + 4]
    return x.permute(*perm).reshape(*lead, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, p: int, c: int, h: int, w: int) -> torch.Tensor:
    *lead, _, _ = tokens.shape
    nd = len(lead)
    x = tokens.reshape(*lead, h // p, w // p, c, p, p)
    perm = list(range(nd)) + [nd + 2, nd, nd + 3, nd + 1, nd + 4]
    return x.permute(*perm).reshape(*lead, c, h, w)


# -- analytic Gaussian world -------------------------------------------------


@dataclass
class GaussianWorld:
    """Data ``x0 ~ N(mu[y], sigma^2 I)`` per caption; ``mu[""]`` serves the null caption.

    When no null mean is given it defaults to the average of the class means.
    """

    mu: dict[str, torch.Tensor]
    sigma: float = 0.0

    def __post_init__(self):
        shapes = {tuple(m.shape) for m in self.mu.values()}
        if len(shapes) != 1:
            raise ShapeError(f"all class means must share one shape, got {sorted(shapes)}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if "" not in self.mu:
            self.mu[""] = torch.stack(list(self.mu.values())).mean(0)

    def mean(self, y: Condition) -> torch.Tensor:
        try:
            return self.mu[y.id]
        except KeyError:
            raise KeyError(f"condition {y.id!r} not in world") from None


def analytic_coeff(world: GaussianWorld, t: int, sched: NoiseSchedule) -> float:
    """Slope of the optimal epsilon predictor in x_t."""
    ab = sched.ab(t)
    return (1.0 - ab) ** 0.5 / (ab * world.sigma**2 + 1.0 - ab)


def analytic_eps(
    world: GaussianWorld, x_t: torch.Tensor, t: int, y: Condition, sched: NoiseSchedule
) -> torch.Tensor:
    ab = sched.ab(t)
    mu = world.mean(y)
    if mu.shape != x_t.shape:
        raise ShapeError(f"analytic_eps: shape mismatch {tuple(x_t.shape)} vs {tuple(mu.shape)}")
    return analytic_coeff(world, t, sched) * (x_t - ab**0.5 * mu)


def analytic_keys(x_t: torch.Tensor, proj: torch.Tensor, patch: int) -> torch.Tensor:
    tokens = patchify(x_t, patch)
    if tokens.shape[-1] != proj.shape[0]:
        raise ShapeError(f"projection {tuple(proj.shape)} does not fit tokens {tuple(tokens.shape)}")
    return tokens @ proj.to(tokens.dtype)


class AnalyticDenoiser:
    differentiable = True

    def __init__(
        self,
        world: GaussianWorld,
        sched: NoiseSchedule,
        patch: int = 4,
        key_dim: int = 16,
        proj: torch.Tensor | None = None,
        seed: int = 0,
    ):
        self.world = world
        self.sched = sched
        self.patch = patch
        if proj is None:
            c = next(iter(world.mu.values())).shape[-3]
            gen = torch.Generator().manual_seed(seed)
            proj = torch.randn(c * patch * patch, key_dim, generator=gen, dtype=DTYPE)
            proj /= math.sqrt(c * patch * patch)
        self.proj = proj

    def predict_eps(self, x_t, t, y):
        return analytic_eps(self.world, x_t, t, y, self.sched)

    def extract_keys(self, x_t, t, y):
        return check_keys(analytic_keys(x_t, self.proj, self.patch))


class FrozenKeys:
    """Wraps a denoiser and withholds gradients from its key tap."""

    differentiable = False

    def __init__(self, inner: Denoiser):
        self.inner = inner

    def predict_eps(self, x_t, t, y):
        return self.inner.predict_eps(x_t, t, y)

    def extract_keys(self, x_t, t, y):
        if x_t.requires_grad:
            raise NotDifferentiableError("this denoiser does not provide key gradients")
        with torch.no_grad():
            return self.inner.extract_keys(x_t, t, y)


# -- tiny trainable video denoiser --------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else DTYPE
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    """Single-head pre-norm self-attention over the second-to-last axis."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def forward(self, h):
        z = self.norm(h)
        q, k, v = self.q(z), self.k(z), self.v(z)
        attn = torch.softmax((q @ k.transpose(-1, -2)) * self.scale, dim=-1)
        return h + self.out(attn @ v), k


class TinyVideoDenoiser(nn.Module):
    """Patch transformer predicting epsilon for a whole video.

    The network estimates the clean video and converts it to epsilon through
    the schedule it was built with, so the schedule's betas are stored as a
    buffer alongside the weights. The clean estimate is
    ``tanh(head(h) + skip(tokens) * kappa_t)`` where ``kappa_t`` is the
    posterior-mean slope for data of std ``data_std``; tanh keeps it inside
    the data range however far ``x_t`` strays.
    """

    differentiable = True

    def __init__(
        self,
        channels: int = 3,
        height: int = 32,
        width: int = 32,
        patch: int = 4,
        dim: int = 16,
        cond_dim: int = EMBED_DIM,
        sched: NoiseSchedule | None = None,
        data_std: float = 0.6,
    ):
        super().__init__()
        self.channels, self.height, self.width, self.patch, self.dim = channels, height, width, patch, dim
        self.data_std = data_std
        sched = sched or build_schedule()
        self.register_buffer("beta", sched.beta.clone().to(DTYPE))
        pdim = channels * patch * patch
        self.embed = nn.Linear(pdim, dim)
        self.t_embed = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.c_embed = nn.Linear(cond_dim, dim, bias=False)
        self.spatial = Attention(dim)
        self.temporal = Attention(dim)
        self.mlp_norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.head = nn.Linear(dim, pdim)
        # direct patch path; the 16-wide trunk alone cannot carry pixel detail
        self.skip = nn.Linear(pdim, pdim)

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def schedule(self) -> NoiseSchedule:
        return schedule_from_betas(self.beta)

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor):
        """Batched pass. x: (B, N, C, H, W); t: (B,) integer steps in [1, T]; cond: (B, EMBED_DIM).

        Returns (eps, keys) with keys of shape (B, N, tokens, dim).
        """
        b, n, c, hgt, wid = x.shape
        idx = t.round().long() if t.is_floating_point() else t.long()
        if bool((idx < 1).any() or (idx > self.T).any()):
            raise ValueError(f"timesteps must lie in [1, {self.T}]")
        tok = patchify(x, self.patch)  # B N P D
        h = self.embed(tok)
        ctx = self.t_embed(timestep_embedding(t.to(x.dtype), self.dim)) + self.c_embed(cond)
        h = h + ctx[:, None, None, :]
        h, keys = self.spatial(h)
        _finite(h, "spatial attention")
        h, _ = self.temporal(h.transpose(1, 2))
        h = h.transpose(1, 2)
        _finite(h, "temporal attention")
        h = h + self.mlp(self.mlp_norm(h))
        alpha_bar = torch.cumprod(1.0 - self.beta.double(), 0).to(x.dtype)
        ab = alpha_bar[idx - 1].view(-1, 1, 1, 1)
        s2 = self.data_std**2
        kappa = ab.sqrt() * s2 / (ab * s2 + 1 - ab)
        x0 = torch.tanh(self.head(h) + self.skip(tok) * kappa)
        out = (tok - ab.sqrt() * x0) / (1 - ab).sqrt()
        _finite(out, "head")
        return unpatchify(out, self.patch, c, hgt, wid), keys

    def _single(self, x_t: torch.Tensor, t: int, y: Condition):
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (self.channels, self.height, self.width):
            raise ShapeError(
                f"expected video (N, {self.channels}, {self.height}, {self.width}), got {tuple(x_t.shape)}"
            )
        tt = torch.tensor([t], dtype=x_t.dtype)
        eps, keys = self(x_t[None], tt, y.embedding[None].to(x_t.dtype))
        return eps[0], keys[0]

    def predict_eps(self, x_t, t, y):
        with torch.no_grad():
            return self._single(x_t, t, y)[0]

    def extract_keys(self, x_t, t, y):
        return check_keys(self._single(x_t, t, y)[1])


def _finite(h: torch.Tensor, layer: str) -> None:
    if not torch.isfinite(h).all():
        raise FloatingPointError(f"non-finite activations after {layer}")


# -- training -----------------------------------------------------------------


DIVERGE_WINDOW = 10


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainResult:
    model: TinyVideoDenoiser
    trace: list[float] = field(default_factory=list)


def train_denoiser(
    videos: torch.Tensor,
    captions: Sequence[str],
    sched: NoiseSchedule,
    steps: int = 3000,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
    p_uncond: float = 0.1,
    model: TinyVideoDenoiser | None = None,
    weight_max: float = 50.0,
) -> TrainResult:
    """Fit a :class:`TinyVideoDenoiser` by epsilon matching on whole videos.

    ``videos`` is (M, N, C, H, W). A fraction ``p_uncond`` of the examples in
    each batch is trained with the null caption so the model supports
    classifier-free guidance.

    Each example's squared error is weighted by ``min(1/alpha_bar_t,
    weight_max)`` and the batch is normalised by the mean weight. Per-t
    weights leave the optimal predictor unchanged; these shift effort to the
    noisy steps, which is where the caption matters. ``weight_max=1`` gives
    the plain unweighted objective.
    """
    if len(videos) == 0 or len(videos) != len(captions):
        raise ValueError("dataset must be nonempty with one caption per video")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    if model is None:
        _, _, c, h, w = videos.shape
        model = TinyVideoDenoiser(channels=c, height=h, width=w, sched=sched)
    elif model.T != sched.T or not torch.allclose(model.beta, sched.beta.to(model.beta.dtype)):
        raise ValueError("model was built for a different noise schedule")
    embs = torch.stack([condition(cap).embedding for cap in captions])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr * 0.05)
    alpha_bar = sched.alpha_bar
    trace: list[float] = []
    baseline = None
    model.train()
    for step in range(steps):
        idx = torch.randint(len(videos), (batch_size,), generator=gen)
        x0 = videos[idx]
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
        ab = alpha_bar[t - 1].view(-1, 1, 1, 1, 1)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        cond = embs[idx].clone()
        drop = torch.rand(batch_size, generator=gen) < p_uncond
        cond[drop] = 0.0
        pred, _ = model(x_t, t, cond)
        wt = torch.clamp(1.0 / ab, max=weight_max)
        loss = (wt * (pred - eps) ** 2).mean() / wt.mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        val = loss.item()
        trace.append(val)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss at step {step}", trace)
        # single batches are noisy; compare running means over DIVERGE_WINDOW steps
        if len(trace) == DIVERGE_WINDOW:
            baseline = sum(trace) / DIVERGE_WINDOW
        elif baseline is not None:
            recent = sum(trace[-DIVERGE_WINDOW:]) / DIVERGE_WINDOW
            if recent > 10 * baseline:
                raise TrainingDiverged(
                    f"mean loss {recent:.4g} at step {step} exceeds 10x initial {baseline:.4g}", trace
                )
        if step % 500 == 0:
            log.info("train step %d loss %.4f", step, val)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return TrainResult(model, trace)


# -- params container ---------------------------------------------------------


def save_params(model: nn.Module, path: str | Path) -> None:
    """Write ``model``'s state as a DMP1 container."""
    chunks = [PARAMS_MAGIC]
    for name, value in model.state_dict().items():
        raw = name.encode("utf-8")
        arr = value.detach().to(torch.float32).contiguous()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.dim()}I", arr.dim(), *arr.shape))
        chunks.append(arr.numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_params(buf: bytes) -> dict[str, torch.Tensor]:
    r = Reader(buf)
    r.magic(PARAMS_MAGIC)
    out: dict[str, torch.Tensor] = {}
    while not r.done:
        (nlen,) = r.u32()
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.u32()
        dims = r.u32(rank)
        count = math.prod(dims)
        if count > 1 << 28:
            raise ContainerError("DIM_OVERFLOW", f"record {name!r} declares {count} values")
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        out[name] = torch.from_numpy(data.reshape(dims))
    return out


def load_params(path: str | Path, **arch) -> TinyVideoDenoiser:
    """Rebuild a :class:`TinyVideoDenoiser` from a DMP1 file.

    The stored betas fix the schedule; ``arch`` overrides the remaining
    constructor defaults.
    """
    state = read_params(Path(path).read_bytes())
    if "beta" not in state:
        raise ContainerError("MISSING_RECORD", "params file has no beta record")
    model = TinyVideoDenoiser(**arch)
    model.beta = state["beta"].clone()
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pretrained_path() -> Path:
    return Path(__file__).parent / "data" / "tiny_denoiser.dmp"


def load_pretrained() -> TinyVideoDenoiser:
    """The shipped denoiser trained on the default synthetic scenes."""
    return load_params(pretrained_path())
