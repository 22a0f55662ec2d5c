"""Pretraining loop: corrupt, restore, backprop through the chain, AdamW step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from ebm_pretrain import corruptions as cx
from ebm_pretrain import tensor_core as tc
from ebm_pretrain.errors import ContractViolation, NumericError
from ebm_pretrain.models import EdgeMaskSpec, EnergyModel, patch_embed_with_regularizers
from ebm_pretrain.sampler import SamplerConfig, StepSize, conditional_restore, sort_restore


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    warmup_frac: float = 0.05
    batch_size: int = 64
    epochs: int = 50
    precision: str = "float32"
    checkpoint_every: int = 10
    augment: bool = True
    scale_lr_mult: float = 100.0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ContractViolation("base_lr must be >= 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ContractViolation("warmup_frac must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractViolation("batch_size must be >= 1 and epochs >= 0")
        if self.scale_lr_mult <= 0:
            raise ContractViolation("scale_lr_mult must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation("AdamW betas must be in [0, 1)")
        tc.dtype_for(self.precision)


@dataclass
class SortConfig:
    """Regularizers active while training the sorting pretext."""

    edge_k_probs: dict[int, float] = field(default_factory=lambda: {1: 0.5, 2: 0.5})
    edge_mask: bool = True
    patch_dropout: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.patch_dropout < 1.0:
            raise ContractViolation("patch_dropout must be in [0, 1)")
        self.edge_spec()

    def edge_spec(self) -> EdgeMaskSpec:
        return EdgeMaskSpec(dict(self.edge_k_probs), active=self.edge_mask)


def cosine_lr(step: int, total: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over ``warmup_frac`` of ``total`` steps, then cosine decay to 0."""
    if total <= 0:
        return base_lr
    warmup = int(math.ceil(warmup_frac * total))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


@dataclass(frozen=True)
class AdamWHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05


def adamw_update(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: AdamWState,
    hyper: AdamWHyper,
    decay: list[bool] | None = None,
    lr_scale: list[float] | None = None,
) -> AdamWState:
    """One decoupled-weight-decay Adam step, in place on ``params``.

    ``decay[i]`` False exempts parameter ``i`` from weight decay;
    ``lr_scale[i]`` multiplies the learning rate of parameter ``i``.
    """
    if len(params) != len(grads):
        raise ContractViolation("params and grads differ in length")
    if decay is None:
        decay = [True] * len(params)
    if lr_scale is None:
        lr_scale = [1.0] * len(params)
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    with torch.no_grad():
        for p, g, m, v, wd, ls in zip(params, grads, state.exp_avg, state.exp_avg_sq, decay, lr_scale):
            if p.shape != g.shape:
                raise ContractViolation(f"grad shape {tuple(g.shape)} != param {tuple(p.shape)}")
            lr = hyper.lr * ls
            if wd and hyper.weight_decay:
                p.mul_(1.0 - lr * hyper.weight_decay)
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            denom = (v / bc2).sqrt_().add_(hyper.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class AdamW:
    """Holds named parameters, their decay flags and the moment buffers."""

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], cfg: TrainConfig,
                 no_decay: Callable[[str], bool],
                 lr_scale: Callable[[str], float] = lambda name: 1.0):
        items = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in items]
        self.params = [p for _, p in items]
        self.decay = [not no_decay(n) for n in self.names]
        self.lr_scale = [float(lr_scale(n)) for n in self.names]
        self.cfg = cfg
        self.state = AdamWState()

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        hyper = AdamWHyper(lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay)
        adamw_update(self.params, grads, self.state, hyper, self.decay, self.lr_scale)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def snapshot(self):
        return (
            [p.detach().clone() for p in self.params],
            self.state.step,
            [m.clone() for m in self.state.exp_avg],
            [v.clone() for v in self.state.exp_avg_sq],
        )

    def restore(self, snap) -> None:
        params, step, m, v = snap
        with torch.no_grad():
            for p, s in zip(self.params, params):
                p.copy_(s)
        self.state = AdamWState(step, m, v)


def pretrain_no_decay(name: str) -> bool:
    """Step size and layer-norm parameters are exempt from weight decay."""
    return name.startswith("alpha.") or ".norm" in name or name.startswith("norm.")


def is_scale_param(name: str) -> bool:
    """Energy head and step size: together they set the scale of the restoring
    gradient, which must grow by orders of magnitude from its initial value."""
    return name.startswith("alpha.") or name.startswith("model.head.")


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    alpha: float
    lr: float
    grad_norm: float
    per_step_losses: list[float]
    rolled_back: bool = False


def augment(x: torch.Tensor, rng: np.random.Generator, pad: int = 2) -> torch.Tensor:
    """Random horizontal flip and random crop from a reflect-padded canvas."""
    n, _, h, w = x.shape
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = offs[i]
        img = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = img.flip(-1) if flips[i] else img
    return out


class Pretrainer:
    """Owns the model, step size, optimizer and RNG streams of one pretraining run."""

    def __init__(
        self,
        model: EnergyModel,
        sampler: SamplerConfig,
        train: TrainConfig,
        corruption: cx.CorruptionSpec,
        rng: cx.SeededRng,
        stats=None,
        sort: SortConfig | None = None,
        total_steps: int | None = None,
    ):
        self.dtype = tc.dtype_for(train.precision)
        self.model = model.to(self.dtype)
        self.alpha = StepSize(sampler.alpha_init, sampler.alpha_learnable)
        self.sampler = sampler
        self.train_cfg = train
        self.corruption = corruption
        self.rng = rng
        self.stats = stats
        self.sort = sort or SortConfig()
        self.optimizer = AdamW(
            self.named_parameters(), train, pretrain_no_decay,
            lambda n: train.scale_lr_mult if is_scale_param(n) else 1.0,
        )
        self.global_step = 0
        self.epoch = 0
        self.total_steps = total_steps or 1

    def named_parameters(self):
        yield from (("model." + n, p) for n, p in self.model.named_parameters())
        yield ("alpha.raw", self.alpha.raw)

    def lr_at(self, step: int) -> float:
        c = self.train_cfg
        return cosine_lr(step, self.total_steps, c.base_lr, c.warmup_frac)

    def chain_loss(self, x: torch.Tensor, epoch: int, batch_idx: int, create_graph: bool = True):
        """Corrupt ``x`` and run the restoration chain. Returns (chain, loss)."""
        crng = self.rng.stream("corruption", epoch, batch_idx)
        if isinstance(self.corruption, cx.ShufflePE):
            cb = cx.apply(self.corruption, x, crng, self.stats, pe_table=self.model.pe_table.detach())
            drng = self.rng.stream("dropout", epoch, batch_idx)
            tokens = patch_embed_with_regularizers(
                self.model, x, self.sort.edge_spec(), self.sort.patch_dropout, drng
            )
            return sort_restore(self.model, x, cb.pe, self.model.pe_table.detach(), self.sampler,
                                self.alpha, tokens=tokens, create_graph=create_graph)
        cb = cx.apply(self.corruption, x, crng, self.stats)
        nrng = self.rng.stream("noise", epoch, batch_idx) if self.sampler.noise_scale else None
        return conditional_restore(self.model, cb.pixels.to(self.dtype), x, self.sampler, self.alpha,
                                   create_graph=create_graph, noise_rng=nrng, provenance=cb.kinds)

    def train_step(self, x: torch.Tensor, epoch: int, batch_idx: int) -> StepMetrics:
        """One optimizer step. On a non-finite value nothing is updated and
        :class:`NumericError` propagates."""
        x = x.to(self.dtype)
        if self.train_cfg.augment:
            x = augment(x, self.rng.stream("augment", epoch, batch_idx))
        lr = self.lr_at(self.global_step)
        snap = self.optimizer.snapshot()
        self.optimizer.zero_grad()
        try:
            chain, loss = self.chain_loss(x, epoch, batch_idx)
            loss.backward()
            sq = 0.0
            for p in self.optimizer.params:
                if p.grad is not None:
                    tc.check_finite(p.grad, "parameter gradient", step=self.global_step)
                    sq += float((p.grad.double() ** 2).sum())
            self.optimizer.step(lr)
            for p in self.optimizer.params:
                tc.check_finite(p.detach(), "updated parameter", step=self.global_step)
        except NumericError:
            self.optimizer.restore(snap)
            self.optimizer.zero_grad()
            raise
        self.optimizer.zero_grad()
        metrics = StepMetrics(
            step=self.global_step,
            epoch=epoch,
            loss=float(loss.detach()),
            alpha=self.alpha.value(),
            lr=lr,
            grad_norm=math.sqrt(sq),
            per_step_losses=chain.losses,
        )
        self.global_step += 1
        return metrics

    def batches(self, n: int, epoch: int) -> list[np.ndarray]:
        order = self.rng.stream("data-order", epoch).permutation(n)
        bs = self.train_cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def fit(
        self,
        x_train: torch.Tensor,
        epochs: int | None = None,
        on_step: Callable[[StepMetrics], None] | None = None,
        on_epoch: Callable[[int, "Pretrainer"], None] | None = None,
    ) -> "FitHistory":
        """Train for ``epochs`` (default: config) starting at ``self.epoch``."""
        epochs = self.train_cfg.epochs if epochs is None else epochs
        n = x_train.shape[0]
        steps_per_epoch = math.ceil(n / self.train_cfg.batch_size)
        self.total_steps = max(self.total_steps, (self.epoch + epochs) * steps_per_epoch)
        history = FitHistory()
        self.model.train()
        for _ in range(epochs):
            epoch = self.epoch
            losses, rollbacks = [], 0
            for b, idx in enumerate(self.batches(n, epoch)):
                try:
                    m = self.train_step(x_train[torch.from_numpy(idx)], epoch, b)
                except NumericError as exc:
                    rollbacks += 1
                    m = StepMetrics(self.global_step, epoch, float("nan"), self.alpha.value(),
                                    self.lr_at(self.global_step), float("nan"), [], rolled_back=True)
                    history.errors.append(str(exc))
                else:
                    losses.append(m.loss)
                history.steps.append(m)
                if on_step:
                    on_step(m)
            history.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
            history.rollbacks.append(rollbacks)
            self.epoch += 1
            if on_epoch:
                on_epoch(epoch, self)
        return history


@dataclass
class FitHistory:
    steps: list[StepMetrics] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    rollbacks: list[int] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
