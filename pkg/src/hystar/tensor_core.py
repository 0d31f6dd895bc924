"""Dense tensors with reverse-mode autodiff.

Storage and the adjoint graph are torch's; this module pins down the small
contract the rest of the package relies on (shape checks, finite outputs,
exact GELU, stabilized row softmax, scalar-only ``backward``) and provides the
finite-difference oracle used by every gradient check.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import torch

from .errors import ContractError, DomainError, NumericError, ShapeError

Tensor = torch.Tensor

DEFAULT_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64

_UNARY = ("relu", "gelu", "exp", "log", "scale")
_BINARY = ("add", "sub", "mul")


@contextlib.contextmanager
def precision(dtype: torch.dtype = VERIFY_DTYPE):
    """Temporarily switch the default floating dtype (64-bit for verification)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    t = torch.as_tensor(data, dtype=dtype or torch.get_default_dtype()).clone()
    if t.ndim == 0:
        t = t.reshape(1)
    _check_finite(t, "tensor")
    t.requires_grad_(requires_grad)
    return t


def _check_finite(t: Tensor, what: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what}: non-finite values")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return _check_finite(a @ b, "matmul")


def gelu(x: Tensor) -> Tensor:
    # erf form, not the tanh approximation
    return torch.nn.functional.gelu(x, approximate="none")


def elementwise(op: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Pointwise ``op``. Binary ops accept a same-shape tensor or a scalar; ``scale`` takes a scalar."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        if isinstance(b, Tensor) and b.numel() != 1 and b.shape != a.shape:
            raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
        out = {"add": torch.add, "sub": torch.sub, "mul": torch.mul}[op](a, b)
    elif op == "relu":
        out = torch.relu(a)
    elif op == "gelu":
        out = gelu(a)
    elif op == "exp":
        out = torch.exp(a)
    elif op == "log":
        if (a <= 0).any():
            raise DomainError("log of a non-positive value")
        out = torch.log(a)
    elif op == "scale":
        if b is None or (isinstance(b, Tensor) and b.numel() != 1):
            raise ContractError("scale needs a scalar factor")
        out = a * b
    else:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {_BINARY + _UNARY}")
    return _check_finite(out, op)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {tuple(x.shape)}")
    _check_finite(x, "softmax_rows input")
    shifted = x - x.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any graph")
    loss.reshape(()).backward()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def trace(loss: Tensor) -> list:
    """Backward-graph nodes of ``loss`` in execution order (inputs before consumers)."""
    order: list = []
    seen: set = set()
    stack = [(loss.grad_fn, False)] if loss.grad_fn is not None else []
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for child, _ in node.next_functions:
            if child is not None and child not in seen:
                stack.append((child, False))
    return order


def finite_difference_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            grad.view(-1)[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max magnitude."""
    a = analytic.detach().to(torch.float64)
    n = numeric.detach().to(torch.float64)
    scale = max(a.abs().max().item(), n.abs().max().item(), floor)
    return (a - n).abs().max().item() / scale


def gradient_errors(
    fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]], h: float = 1e-4
) -> dict[str, float]:
    """Analytic-vs-central-difference error for each named tensor of a scalar function."""
    for _, p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    errors = {}
    for name, p in params:
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        errors[name] = max_relative_error(analytic, finite_difference_grad(fn, p, h))
    return errors
