"""Dense tensor primitives with reverse-mode gradients.

The arithmetic is carried by ``torch`` tensors (float32, CPU) and torch's
autograd tape records the reverse rules. What this module adds on top is the
shape discipline the rest of the package relies on: elementwise ops accept
identical shapes or a scalar, nothing broadcasts implicitly, and every
mismatch raises :class:`ShapeError` naming both operands.

:func:`grad_check` is deliberately independent of autograd: it perturbs
coordinates and evaluates central differences in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DTYPE = torch.float32
COS_EPS = 1e-8

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=DTYPE).clone()
    if requires_grad:
        t.requires_grad_(True)
    return t


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, Tensor) and x.dim() == 0)


def _same_shape(op: str, a, b) -> None:
    if _is_scalar(a) or _is_scalar(b):
        return
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b) -> Tensor:
    _same_shape("add", a, b)
    return a + b


def sub(a, b) -> Tensor:
    _same_shape("sub", a, b)
    return a - b


def mul(a, b) -> Tensor:
    _same_shape("mul", a, b)
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * c


def square(a: Tensor) -> Tensor:
    return a * a


def sqrt(a: Tensor) -> Tensor:
    return torch.sqrt(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul: need rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return a.transpose(-1, -2)


def sum(a: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return a.sum()
    return a.sum(dim=axis)


def mean(a: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    if axis is None:
        return a.mean()
    return a.mean(dim=axis)


def l2norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at an all-zero slice is 0."""
    sq = (a * a).sum(dim=axis)
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, torch.sqrt(safe), torch.zeros_like(sq))


def cosine_matrix(rows: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of ``rows`` (..., R, C).

    Zero rows count as orthogonal to everything; the diagonal is exactly 1.
    """
    if rows.dim() < 2:
        raise ShapeError(f"cosine_matrix: need rank >= 2, got {tuple(rows.shape)}")
    norm = l2norm(rows, axis=-1).unsqueeze(-1)
    unit = torch.where(norm > 0, rows / (norm + COS_EPS), torch.zeros_like(rows))
    sim = unit @ unit.transpose(-1, -2)
    eye = torch.eye(rows.shape[-2], dtype=rows.dtype)
    return sim * (1 - eye) + eye


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between matching rows of two (..., C) tensors."""
    _same_shape("cosine_rows", a, b)
    na, nb = l2norm(a), l2norm(b)
    dot = (a * b).sum(dim=-1)
    ok = (na > 0) & (nb > 0)
    return torch.where(ok, dot / ((na + COS_EPS) * (nb + COS_EPS)), torch.zeros_like(dot))


def softmax(a: Tensor) -> Tensor:
    return torch.softmax(a, dim=-1)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    n = 1
    for s in shape:
        n *= s
    if n != a.numel():
        raise ShapeError(f"reshape: cannot view {tuple(a.shape)} as {shape}")
    return a.reshape(shape)


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {tuple(a.shape)}")
    return a.narrow(axis, start, stop - start)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(ref, other)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {tuple(ref)} vs {tuple(other)}")
    return torch.cat(list(parts), dim=axis)


def backward(root: Tensor, leaves: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``root`` with respect to each of ``leaves``.

    Leaves the root does not depend on get a zero gradient.
    """
    if root.dim() != 0:
        raise ShapeError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    grads = torch.autograd.grad(root, list(leaves), allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, grads)]


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Both sides are evaluated in float64, so ``f`` must be dtype-generic.
    ``coords`` restricts the finite-difference sweep to that many randomly
    chosen coordinates.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    x64 = x.detach().to(torch.float64)
    with torch.no_grad():
        f0 = f(x64)
    if not torch.isfinite(f0).all():
        raise ValueError("grad_check: f(x) is not finite")

    xg = x64.clone().requires_grad_(True)
    (analytic,) = backward(f(xg), [xg])
    analytic = analytic.detach().reshape(-1)

    n = x64.numel()
    if coords is None or coords >= n:
        idx = range(n)
    else:
        gen = torch.Generator().manual_seed(seed)
        idx = torch.randperm(n, generator=gen)[:coords].tolist()

    worst = 0.0
    flat = x64.reshape(-1)
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(x64).item()
            flat[i] = orig - h
            fm = f(x64).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(analytic[i].item() - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst
