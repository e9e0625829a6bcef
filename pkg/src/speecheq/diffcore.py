"""Differentiable tensor substrate.

Reverse-mode autodiff is delegated to torch; this module fixes the dtype
policy, wraps the op set the model and losses rely on with explicit shape
checks, and provides an independent central-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def tensor(values, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return torch.tensor(np.asarray(values), dtype=dtype, requires_grad=requires_grad)


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in shape {tuple(t.shape)}")
    return t


def _shape_error(op: str, *tensors: torch.Tensor) -> ShapeError:
    shapes = " vs ".join(str(tuple(t.shape)) for t in tensors)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


def _broadcastable(a: torch.Tensor, b: torch.Tensor) -> bool:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
        return True
    except RuntimeError:
        return False


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise _shape_error("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if not _broadcastable(a, b):
        raise _shape_error("mul", a, b)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           dilation: int = 1, padding: str | int = "same", groups: int = 1) -> torch.Tensor:
    """``x``: (batch, channels, time); ``weight``: (out, in/groups, kernel)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1] * groups:
        raise _shape_error("conv1d", x, weight)
    return F.conv1d(x, weight, bias, dilation=dilation, padding=padding, groups=groups)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def mean(x: torch.Tensor, dim: int | None = None, keepdim: bool = False) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def variance(x: torch.Tensor, dim: int | None = None, keepdim: bool = False) -> torch.Tensor:
    """Population (1/N) variance."""
    if dim is None:
        return torch.mean((x - x.mean()) ** 2)
    mu = x.mean(dim=dim, keepdim=True)
    return torch.mean((x - mu) ** 2, dim=dim, keepdim=keepdim)


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != dim % ref.dim()
        ):
            raise _shape_error("concat", ref, t)
    return torch.cat(list(tensors), dim=dim)


def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[dim]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for dim {dim} of shape {tuple(x.shape)}")
    return x.narrow(dim, start, stop - start)


def broadcast(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    try:
        return x.expand(*shape)
    except RuntimeError:
        raise ShapeError(f"broadcast: cannot expand {tuple(x.shape)} to {tuple(shape)}") from None


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tol:.0e}, {self.n_checked} coords)")


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-4,
    tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    name: str = "f",
) -> GradCheckReport:
    """Compare autograd against central differences ``(f(x+h) - f(x-h)) / 2h``.

    Per-coordinate error is ``|a - n| / max(|a|, |n|, 1e-3 * max|n|, 1e-10)``
    so coordinates whose true gradient is negligible relative to the overall
    gradient scale are judged against that scale.  ``max_coords`` samples a
    random subset of coordinates across all inputs.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach().contiguous() for x, g in zip(leaves, grads)]

    coords = [(i, j) for i, x in enumerate(leaves) for j in range(x.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    base = [x.detach().clone() for x in leaves]
    a_vals, n_vals = [], []
    with torch.no_grad():
        for i, j in coords:
            flat = base[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            plus = f(*base).item()
            flat[j] = orig - h
            minus = f(*base).item()
            flat[j] = orig
            n_vals.append((plus - minus) / (2 * h))
            a_vals.append(analytic[i].reshape(-1)[j].item())

    a = np.asarray(a_vals)
    n = np.asarray(n_vals)
    if a.size == 0:
        return GradCheckReport(name, 0.0, 0.0, 0, tol)
    abs_err = np.abs(a - n)
    floor = max(1e-3 * float(np.max(np.abs(n))), 1e-10)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradCheckReport(name, float(rel.max()), float(abs_err.max()), len(coords), tol)


def core_op_cases(seed: int = 0) -> dict[str, tuple[Callable[..., torch.Tensor], list[torch.Tensor]]]:
    """Scalar-valued probes, one per core op, on random float64 inputs.

    Each probe contracts the op's output with a fixed random tensor so every
    output element contributes to the gradient.
    """
    g = torch.Generator().manual_seed(seed)

    def r(*shape, positive=False):
        x = torch.randn(*shape, generator=g, dtype=CHECK_DTYPE)
        return x.abs() + 0.5 if positive else x

    def away_from_zero(*shape):
        x = r(*shape)
        return x + 0.2 * torch.sign(x)

    def probe(shape):
        return torch.randn(*shape, generator=g, dtype=CHECK_DTYPE)

    w34, w33, w3, w2x3x5 = probe((3, 4)), probe((3, 3)), probe((3,)), probe((2, 3, 5))
    w36, w32, w34b = probe((3, 6)), probe((3, 2)), probe((3, 4))
    cases = {
        "add": (lambda a, b: (add(a, b) * w34).sum(), [r(3, 4), r(4)]),
        "mul": (lambda a, b: (mul(a, b) * w34).sum(), [r(3, 4), r(3, 1)]),
        "matmul": (lambda a, b: (matmul(a, b) * w33).sum(), [r(3, 5), r(5, 3)]),
        "conv1d": (lambda x, k, b: (conv1d(x, k, b, dilation=2) * w2x3x5).sum(), [r(2, 4, 5), r(3, 4, 3), r(3)]),
        "sigmoid": (lambda x: (sigmoid(x) * w34).sum(), [r(3, 4)]),
        "tanh": (lambda x: (tanh(x) * w34).sum(), [r(3, 4)]),
        "relu": (lambda x: (relu(x) * w34).sum(), [away_from_zero(3, 4)]),
        "softmax": (lambda x: (softmax(x) * w34).sum(), [r(3, 4)]),
        "log_softmax": (lambda x: (log_softmax(x) * w34).sum(), [r(3, 4)]),
        "mean": (lambda x: (mean(x, dim=1) * w3).sum(), [r(3, 4)]),
        "variance": (lambda x: (variance(x, dim=1) * w3).sum(), [r(3, 4)]),
        "concat": (lambda a, b: (concat([a, b], dim=1) * w36).sum(), [r(3, 2), r(3, 4)]),
        "slice": (lambda x: (slice_(x, 1, 1, 3) * w32).sum(), [r(3, 4)]),
        "broadcast": (lambda x: (broadcast(x, (3, 4)) * w34b).sum(), [r(1, 4)]),
    }
    return cases
