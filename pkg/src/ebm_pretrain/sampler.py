"""Conditional restoration chains.

Starting from a corrupted state, each step moves the state down the energy
gradient: ``x_j = x_{j-1} - alpha * grad_x E(SG(x_{j-1}))``. Every step's
output is compared to the clean target; the mean of the per-step losses is
differentiable w.r.t. the model and ``alpha`` through each step's gradient
term (double backprop) but not across steps, because each step starts from a
detached copy of the previous state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ebm_pretrain import tensor_core as tc
from ebm_pretrain.errors import ContractViolation, NumericError
from ebm_pretrain.models import EnergyModel, TokenSet


@dataclass
class SamplerConfig:
    steps: int = 2
    alpha_init: float = 0.1
    alpha_learnable: bool = True
    noise_scale: float | None = None
    loss_kind: str = "smooth_l1"
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("sampler steps must be >= 1")
        if self.alpha_init <= 0:
            raise ContractViolation("alpha_init must be > 0")
        if self.loss_kind not in ("smooth_l1", "mse"):
            raise ContractViolation("loss_kind must be 'smooth_l1' or 'mse'")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ContractViolation("noise_scale must be >= 0")
        if self.smooth_l1_beta <= 0:
            raise ContractViolation("smooth_l1_beta must be > 0")

    def pixel_loss(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.loss_kind == "mse":
            return tc.mse(pred, target)
        return tc.smooth_l1(pred, target, self.smooth_l1_beta)


def softplus_inverse(alpha: float) -> float:
    # log(exp(a) - 1), written to stay accurate for small a
    return alpha + math.log(-math.expm1(-alpha))


def alpha_value(raw: torch.Tensor | float) -> float:
    """Positive step size from its unconstrained parameter, ``log(1 + exp(raw))``."""
    raw = torch.as_tensor(raw, dtype=torch.float64)
    return float(F.softplus(raw))


class StepSize(nn.Module):
    """Learnable positive step size, softplus-reparameterized."""

    def __init__(self, alpha_init: float = 0.1, learnable: bool = True):
        super().__init__()
        if alpha_init <= 0:
            raise ContractViolation("alpha_init must be > 0")
        # kept in float64 whatever the run precision; a 0-dim tensor does not
        # promote the float32 tensors it multiplies
        self.raw = nn.Parameter(
            torch.tensor(softplus_inverse(alpha_init), dtype=torch.float64),
            requires_grad=learnable,
        )

    def forward(self) -> torch.Tensor:
        return F.softplus(self.raw)

    def value(self) -> float:
        return alpha_value(self.raw.detach())


@dataclass
class SamplingChain:
    states: list[torch.Tensor]
    losses: list[float]
    alpha: float
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.states) != len(self.losses) + 1:
            raise ContractViolation("a chain holds one more state than losses")


def _as_alpha(alpha: Any) -> torch.Tensor | float:
    if isinstance(alpha, StepSize):
        return alpha()
    return alpha


def conditional_restore(
    model: EnergyModel,
    x_corrupt: torch.Tensor,
    target: torch.Tensor,
    cfg: SamplerConfig,
    alpha: StepSize | torch.Tensor | float,
    create_graph: bool = True,
    noise_rng: np.random.Generator | None = None,
    provenance: list[str] | None = None,
) -> tuple[SamplingChain, torch.Tensor]:
    """Run the ``cfg.steps``-step pixel chain and return it with the mean step loss."""
    if x_corrupt.shape != target.shape:
        raise ContractViolation("x_corrupt and target must have the same shape")
    a = _as_alpha(alpha)
    x = x_corrupt.detach()
    states = [x]
    losses: list[float] = []
    total = None
    for j in range(1, cfg.steps + 1):
        x_in = x.detach().requires_grad_(True)
        try:
            e = model(x_in).sum()
            (g,) = tc.grad(e, [x_in], create_graph=create_graph)
        except NumericError as exc:
            raise NumericError(f"step {j}: {exc}", step=j, location=exc.location) from exc
        x = x_in - a * g
        if cfg.noise_scale:
            if noise_rng is None:
                raise ContractViolation("noise_scale set but no noise_rng given")
            xi = torch.from_numpy(noise_rng.standard_normal(tuple(x.shape))).to(x.dtype)
            x = x + cfg.noise_scale * xi
        loss = cfg.pixel_loss(x, target)
        if not torch.isfinite(loss.detach()):
            raise NumericError(f"step {j}: non-finite loss", step=j, location="loss")
        total = loss if total is None else total + loss
        states.append(x.detach())
        losses.append(float(loss.detach()))
    total = total / cfg.steps
    chain = SamplingChain(states, losses, float(torch.as_tensor(a).detach()), list(provenance or []))
    return chain, total


def masked_pe_mse(pe: torch.Tensor, true_pe: torch.Tensor, keep: torch.Tensor | None) -> torch.Tensor:
    """MSE between PE states and the true table, over surviving rows only."""
    target = true_pe.expand_as(pe)
    d2 = (pe - target) ** 2
    if keep is None:
        return d2.mean()
    w = keep.to(pe.dtype).unsqueeze(-1)
    return (d2 * w).sum() / (w.sum() * pe.shape[-1])


def sort_restore(
    model: EnergyModel,
    x: torch.Tensor,
    shuffled_pe: torch.Tensor,
    true_pe: torch.Tensor,
    cfg: SamplerConfig,
    alpha: StepSize | torch.Tensor | float,
    tokens: TokenSet | None = None,
    create_graph: bool = True,
) -> tuple[SamplingChain, torch.Tensor]:
    """Descend the energy w.r.t. per-image position embeddings.

    ``tokens`` carries regularized patch embeddings and the patch-dropout
    mask; when omitted the plain patch embedding of ``x`` is used and every
    row counts toward the loss. The loss is always MSE.
    """
    n, P = x.shape[0], model.config.num_patches
    if shuffled_pe.dim() == 2:
        shuffled_pe = shuffled_pe.expand(n, -1, -1)
    if shuffled_pe.shape != (n, P, model.config.embed_dim):
        raise ContractViolation(f"shuffled_pe has shape {tuple(shuffled_pe.shape)}")
    a = _as_alpha(alpha)
    if tokens is None:
        emb, keep = model.patch_embed(model.patchify(x)), None
    else:
        emb, keep = tokens.tokens, tokens.keep
    if not create_graph:
        emb = emb.detach()
    pe = shuffled_pe.detach()
    states = [pe]
    losses: list[float] = []
    total = None
    for j in range(1, cfg.steps + 1):
        pe_in = pe.detach().requires_grad_(True)
        try:
            e = model.head(model.features_from_tokens(emb, pe_in, keep)).sum()
            (g,) = tc.grad(e, [pe_in], create_graph=create_graph, retain_graph=True)
        except NumericError as exc:
            raise NumericError(f"step {j}: {exc}", step=j, location=exc.location) from exc
        pe = pe_in - a * g
        loss = masked_pe_mse(pe, true_pe, keep)
        if not torch.isfinite(loss.detach()):
            raise NumericError(f"step {j}: non-finite loss", step=j, location="loss")
        total = loss if total is None else total + loss
        states.append(pe.detach())
        losses.append(float(loss.detach()))
    total = total / cfg.steps
    chain = SamplingChain(states, losses, float(torch.as_tensor(a).detach()), ["shuffle_pe"] * n)
    return chain, total
