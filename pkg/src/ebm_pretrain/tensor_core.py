"""Differentiable array layer.

Tensors are ``torch.Tensor``; the autograd graph recorded by torch is the
computation record. This module pins the conventions the rest of the package
relies on: run-level precision, gradients that can themselves be
differentiated (``create_graph=True``), a finite-difference oracle, and the op
catalog used by the vision model with its fixed numerical constants.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from ebm_pretrain.errors import ContractViolation, NumericError

LAYER_NORM_EPS = 1e-6

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def dtype_for(precision: str) -> torch.dtype:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ContractViolation(
            f"precision must be one of {sorted(_DTYPES)}, got {precision!r}"
        ) from None


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default floating dtype ("float32" or "float64")."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype_for(name))
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(t: torch.Tensor, where: str, step: int | None = None) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}", step=step, location=where)
    return t


def grad(
    output: torch.Tensor,
    inputs: Sequence[torch.Tensor],
    create_graph: bool = False,
    retain_graph: bool | None = None,
) -> list[torch.Tensor]:
    """Gradient of a scalar ``output`` with respect to each of ``inputs``.

    Inputs that did not take part in producing ``output`` get a zero gradient.
    With ``create_graph=True`` the returned tensors are part of the graph and
    can be differentiated again (double backpropagation).
    """
    if output.numel() != 1:
        raise ContractViolation(
            f"grad() needs a scalar output, got shape {tuple(output.shape)}"
        )
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            raise ContractViolation(f"input[{i}] is not grad-tracked")
    grads = torch.autograd.grad(
        output.reshape(()),
        list(inputs),
        create_graph=create_graph,
        retain_graph=retain_graph,
        allow_unused=True,
    )
    out = []
    for i, (g, t) in enumerate(zip(grads, inputs)):
        if g is None:
            g = torch.zeros_like(t)
        check_finite(g.detach(), f"grad input[{i}] shape={tuple(t.shape)}")
        out.append(g)
    return out


def numeric_grad(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-4
) -> torch.Tensor:
    """Central-difference estimate of the gradient of scalar-valued ``f`` at ``x``."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    base = x.detach().clone()
    flat = base.reshape(-1)
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(f(base))
            flat[i] = orig - eps
            down = float(f(base))
            flat[i] = orig
            out[i] = (up - down) / (2.0 * eps)
    return out.reshape(x.shape)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def layer_norm(
    x: torch.Tensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps=LAYER_NORM_EPS)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(
            f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


def broadcast(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    try:
        return x.expand(*shape)
    except RuntimeError as exc:
        raise ContractViolation(str(exc)) from None


# Unary/binary/structural ops the model is built from, keyed by name. Every
# entry maps tensors to a tensor and is twice differentiable.
OP_CATALOG: dict[str, Callable[..., torch.Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "pow": torch.pow,
    "exp": torch.exp,
    "sqrt": torch.sqrt,
    "tanh": torch.tanh,
    "gelu": gelu,
    "matmul": matmul,
    "reshape": torch.reshape,
    "transpose": torch.transpose,
    "concat": concat,
    "slice": lambda x, sl: x[sl],
    "sum": torch.sum,
    "mean": torch.mean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "broadcast": broadcast,
}


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ContractViolation(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean Huber-style loss: 0.5 d^2/beta inside |d|<beta, |d|-0.5 beta outside."""
    _check_same_shape(pred, target)
    if beta <= 0:
        raise ContractViolation("beta must be positive")
    d = pred - target
    ad = d.abs()
    return torch.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta).mean()


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, target)
    d = pred - target
    return (d * d).mean()
