"""Desk-scale probes of a pretrained energy model.

None of these functions update the pretrained model's parameters; finetuning
works on a deep copy.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ebm_pretrain import corruptions as cx
from ebm_pretrain.errors import ContractViolation
from ebm_pretrain.models import EdgeMaskSpec, EnergyModel, patch_embed_with_regularizers
from ebm_pretrain.sampler import SamplerConfig, conditional_restore, sort_restore
from ebm_pretrain.training import AdamW, TrainConfig, augment, cosine_lr


def _batched(n: int, bs: int):
    for i in range(0, n, bs):
        yield slice(i, min(i + bs, n))


@torch.no_grad()
def energies(model: EnergyModel, x: torch.Tensor, batch_size: int = 128) -> np.ndarray:
    model.eval()
    return np.concatenate([model(x[s]).double().numpy() for s in _batched(len(x), batch_size)])


def restore_chain(model, alpha, x, corruption, cfg: SamplerConfig, rng, stats=None,
                  batch_size: int = 128):
    """Corrupt ``x`` and run the chain without building a parameter graph.

    Returns the list of states ``[x0, ..., xN]`` (each ``[n, c, h, w]``) and
    the per-image corruption kinds.
    """
    model.eval()
    cb = cx.apply(corruption, x, rng, stats)
    states: list[list[torch.Tensor]] = [[] for _ in range(cfg.steps + 1)]
    for s in _batched(len(x), batch_size):
        chain, _ = conditional_restore(model, cb.pixels[s].to(x.dtype), x[s], cfg, alpha,
                                       create_graph=False)
        for j, st in enumerate(chain.states):
            states[j].append(st)
    return [torch.cat(st) for st in states], cb.kinds


@dataclass
class HistogramReport:
    groups: dict[str, np.ndarray]
    bin_edges: np.ndarray
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        sizes = {len(v) for v in self.groups.values()}
        if len(sizes) > 1:
            raise ContractViolation("histogram groups must be the same size")
        for k, v in self.groups.items():
            self.means[k] = float(np.mean(v))
            self.stds[k] = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def paired_gap(self, a: str = "step0", b: str = "real") -> tuple[float, float]:
        """Mean of per-image ``a - b`` and its standard error."""
        d = self.groups[a] - self.groups[b]
        se = float(np.std(d, ddof=1) / math.sqrt(len(d))) if len(d) > 1 else float("inf")
        return float(np.mean(d)), se

    def histograms(self) -> dict[str, np.ndarray]:
        return {k: np.histogram(v, bins=self.bin_edges)[0] for k, v in self.groups.items()}


def energy_histogram(model, alpha, x: torch.Tensor, corruption, cfg: SamplerConfig,
                     rng: np.random.Generator, stats=None, bins: int = 30) -> HistogramReport:
    """Energies of real images, their corruptions, and every restoration step."""
    states, _ = restore_chain(model, alpha, x, corruption, cfg, rng, stats)
    groups = {"real": energies(model, x)}
    for j, st in enumerate(states):
        groups[f"step{j}"] = energies(model, st)
    edges = np.histogram_bin_edges(np.concatenate(list(groups.values())), bins=bins)
    return HistogramReport(groups, edges)


def psnr(pred01: torch.Tensor, target01: torch.Tensor) -> float:
    mse = float(((pred01.clamp(0, 1) - target01.clamp(0, 1)) ** 2).mean())
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def restoration_quality(model, alpha, x: torch.Tensor, corruption, cfg: SamplerConfig,
                        rng: np.random.Generator, stats=None) -> dict[str, float]:
    """MSE (normalized space) before/after restoration and the PSNR gain in [0, 1] space."""
    states, _ = restore_chain(model, alpha, x, corruption, cfg, rng, stats)
    x0, xn = states[0], states[-1]
    out = {
        "mse_corrupted": float(((x0 - x) ** 2).mean()),
        "mse_restored": float(((xn - x) ** 2).mean()),
    }
    if stats is not None:
        ref = stats.denormalize(x)
        p0, pn = psnr(stats.denormalize(x0), ref), psnr(stats.denormalize(xn), ref)
        out.update(psnr_corrupted=p0, psnr_restored=pn, psnr_gain=pn - p0)
    return out


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    n_eval: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractViolation("accuracy must be in [0, 1]")


def _probe_result(pred: np.ndarray, labels: np.ndarray) -> ProbeResult:
    per_class = {int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)}
    return ProbeResult(float(np.mean(pred == labels)), per_class, int(len(labels)))


@torch.no_grad()
def extract_features(model: EnergyModel, x: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    model.eval()
    return torch.cat([model.features(x[s]) for s in _batched(len(x), batch_size)])


def _check_labels(labels: np.ndarray) -> None:
    if len(np.unique(labels)) < 2:
        raise ContractViolation("labeled evaluation needs at least two classes")


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


def linear_probe(model: EnergyModel, x_train, y_train, x_test, y_test,
                 cfg: ProbeConfig | None = None) -> ProbeResult:
    """Multinomial logistic regression on frozen class-token features."""
    cfg = cfg or ProbeConfig()
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    _check_labels(y_train)
    n_cls = int(max(y_train.max(), y_test.max())) + 1
    f_train = extract_features(model, x_train).detach()
    f_test = extract_features(model, x_test).detach()
    clf = nn.Linear(f_train.shape[1], n_cls).to(f_train.dtype)
    nn.init.zeros_(clf.weight)
    nn.init.zeros_(clf.bias)
    tcfg = TrainConfig(base_lr=cfg.lr, beta2=0.999, weight_decay=0.0)
    opt = AdamW(clf.named_parameters(), tcfg, no_decay=lambda n: True)
    rng = np.random.default_rng(cfg.seed)
    yt = torch.from_numpy(y_train)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y_train))
        for s in _batched(len(order), cfg.batch_size):
            idx = torch.from_numpy(order[s])
            opt.zero_grad()
            F.cross_entropy(clf(f_train[idx]), yt[idx]).backward()
            opt.step(cfg.lr)
    with torch.no_grad():
        pred = clf(f_test).argmax(-1).numpy()
    return _probe_result(pred, y_test)


class Classifier(nn.Module):
    """Backbone with its energy head swapped for a class-count head."""

    def __init__(self, backbone: EnergyModel, n_cls: int, generator: torch.Generator | None = None):
        super().__init__()
        self.backbone = backbone
        self.backbone.head = nn.Identity()
        self.backbone.pos_embed.requires_grad_(True)
        self.fc = nn.Linear(backbone.config.embed_dim, n_cls)
        nn.init.trunc_normal_(self.fc.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.backbone.features(x))


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-3
    beta2: float = 0.999
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    batch_size: int = 32
    seed: int = 0


def finetune(model: EnergyModel, x_train, y_train, x_test, y_test,
             cfg: FinetuneConfig | None = None) -> tuple[ProbeResult, Classifier]:
    """Train every parameter of a copy of ``model`` with a new classifier head."""
    cfg = cfg or FinetuneConfig()
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    _check_labels(y_train)
    n_cls = int(max(y_train.max(), y_test.max())) + 1
    g = torch.Generator().manual_seed(cfg.seed)
    clf = Classifier(copy.deepcopy(model), n_cls, generator=g).to(x_train.dtype)
    tcfg = TrainConfig(base_lr=cfg.lr, beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                       warmup_frac=cfg.warmup_frac, batch_size=cfg.batch_size)
    opt = AdamW(clf.named_parameters(), tcfg,
                no_decay=lambda n: ".norm" in n or n.endswith(".bias") or "pos_embed" in n
                or "cls_token" in n)
    rng = np.random.default_rng(cfg.seed)
    yt = torch.from_numpy(y_train)
    steps_per_epoch = math.ceil(len(y_train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        clf.train()
        order = rng.permutation(len(y_train))
        for s in _batched(len(order), cfg.batch_size):
            idx = torch.from_numpy(order[s])
            xb = augment(x_train[idx], rng)
            opt.zero_grad()
            F.cross_entropy(clf(xb), yt[idx]).backward()
            opt.step(cosine_lr(step, total, cfg.lr, cfg.warmup_frac))
            step += 1
    clf.eval()
    with torch.no_grad():
        pred = torch.cat([clf(x_test[s]) for s in _batched(len(x_test), 128)]).argmax(-1).numpy()
    return _probe_result(pred, y_test), clf


def greedy_match(restored: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Assign each restored row a distinct true row, nearest pairs first.

    Pairs are taken in order of (distance, restored index, true index), so
    ties go to the lower index. Returns ``assign[r] = t``.
    """
    d = np.sqrt(((restored[:, None, :] - true[None, :, :]) ** 2).sum(-1))
    rows, cols = np.meshgrid(np.arange(d.shape[0]), np.arange(d.shape[1]), indexing="ij")
    order = np.lexsort((cols.ravel(), rows.ravel(), d.ravel()))
    assign = np.full(d.shape[0], -1)
    used = np.zeros(d.shape[1], dtype=bool)
    for k in order:
        r, t = rows.ravel()[k], cols.ravel()[k]
        if assign[r] < 0 and not used[t]:
            assign[r] = t
            used[t] = True
    return assign


def sort_accuracy(model: EnergyModel, alpha, x: torch.Tensor, cfg: SamplerConfig,
                  rng: np.random.Generator, edge_mask: EdgeMaskSpec | None = None,
                  shuffled: torch.Tensor | None = None, batch_size: int = 128) -> float:
    """Fraction of patches whose restored PE is matched back to their own grid cell.

    A proxy metric: PEs are shuffled per image, restored by the sorting
    chain, then greedily matched to the true table. Patch dropout is off.
    """
    model.eval()
    table = model.pe_table.detach()
    if shuffled is None:
        shuffled, _ = cx.shuffle_pe(table, rng, n=len(x))
    edge_mask = edge_mask or EdgeMaskSpec(active=False)
    correct, total = 0, 0
    true_np = table.double().numpy()
    for s in _batched(len(x), batch_size):
        tokens = patch_embed_with_regularizers(model, x[s], edge_mask, 0.0, rng)
        chain, _ = sort_restore(model, x[s], shuffled[s], table, cfg, alpha,
                                tokens=tokens, create_graph=False)
        final = chain.states[-1].double().numpy()
        for img in final:
            assign = greedy_match(img, true_np)
            correct += int(np.sum(assign == np.arange(len(assign))))
            total += len(assign)
    return correct / total
