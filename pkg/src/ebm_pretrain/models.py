"""Micro-scale ViT backbone with a scalar energy head.

The energy of an image is ``head(psi(x))`` where ``psi`` is the class-token
feature of a pre-norm ViT after its final layer norm and ``head`` is a
bias-free linear map to one output. Position embeddings are a fixed 2D sin-cos
table during pretraining; the sorting pretext substitutes its own (shuffled,
per-image) table through :func:`energy_with_pe`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ebm_pretrain import tensor_core as tc
from ebm_pretrain.errors import ContractViolation, NumericError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    in_chans: int = 3
    class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractViolation("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ContractViolation("embed_dim must be divisible by heads")
        if self.embed_dim % 4:
            raise ContractViolation("embed_dim must be divisible by 4 for sin-cos PE")
        if not self.class_token:
            raise ContractViolation("class_token must be true")
        if min(self.depth, self.heads, self.mlp_ratio, self.in_chans) < 1:
            raise ContractViolation("depth, heads, mlp_ratio, in_chans must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size * self.patch_size

    def num_parameters(self) -> int:
        """Closed-form parameter count, including the fixed PE table."""
        d, h = self.embed_dim, self.embed_dim * self.mlp_ratio
        patch = self.patch_dim * d + d
        block = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
        return patch + d + self.num_patches * d + self.depth * block + 2 * d + d


@dataclass
class EdgeMaskSpec:
    """Distribution over the width of the zeroed outer band of each patch."""

    k_probs: dict[int, float] = field(default_factory=lambda: {1: 0.5, 2: 0.5})
    active: bool = True

    def __post_init__(self):
        total = sum(self.k_probs.values())
        if abs(total - 1.0) > 1e-9 or any(p < 0 for p in self.k_probs.values()):
            raise ContractViolation("edge-mask probabilities must be >= 0 and sum to 1")
        if any(k < 0 for k in self.k_probs):
            raise ContractViolation("edge-mask widths must be >= 0")


def sincos_pe(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """2D sin-cos position table of shape ``[grid_h * grid_w, dim]``.

    The first half of the channels encodes the row index and the second half
    the column index; each half is ``[sin(pos * w_k), cos(pos * w_k)]`` with
    ``w_k = 10000 ** (-k / (dim / 4))``. Rows are in row-major grid order.
    """
    if dim % 4:
        raise ContractViolation(f"dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    out_r = np.outer(rows.reshape(-1), omega)
    out_c = np.outer(cols.reshape(-1), omega)
    table = np.concatenate(
        [np.sin(out_r), np.cos(out_r), np.sin(out_c), np.cos(out_c)], axis=1
    )
    return torch.from_numpy(table).to(torch.get_default_dtype())


def _trunc_normal_(t: torch.Tensor, std: float, generator: torch.Generator | None):
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)


class Block(nn.Module):
    """Pre-norm transformer block: self-attention then MLP, each residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, eps=tc.LAYER_NORM_EPS)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=tc.LAYER_NORM_EPS)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def attention(self, x: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        n, t, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = tc.matmul(q, k.transpose(-2, -1)) * (hd ** -0.5)
        if key_mask is not None:
            # dropped keys get exactly zero weight, same as removing the token
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = tc.softmax(logits, dim=-1)
        out = tc.matmul(attn, v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attention(self.norm1(x), key_mask)
        return x + self.fc2(tc.gelu(self.fc1(self.norm2(x))))


class EnergyModel(nn.Module):
    def __init__(self, config: ViTConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(
            sincos_pe(config.grid, config.grid, d), requires_grad=False
        )
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d, eps=tc.LAYER_NORM_EPS)
        self.head = nn.Linear(d, 1, bias=False)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _trunc_normal_(m.weight, 0.02, generator)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        _trunc_normal_(self.cls_token.data, 0.02, generator)
        with torch.no_grad():
            self.pos_embed.copy_(sincos_pe(self.config.grid, self.config.grid, self.config.embed_dim))

    @property
    def pe_table(self) -> torch.Tensor:
        return self.pos_embed

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """``[n, c, h, w]`` -> ``[n, patches, c*p*p]`` in row-major grid order."""
        cfg = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.in_chans, cfg.image_size, cfg.image_size):
            raise ContractViolation(
                f"expected images [n, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}],"
                f" got {tuple(x.shape)}"
            )
        n, c, p, g = x.shape[0], cfg.in_chans, cfg.patch_size, cfg.grid
        x = x.reshape(n, c, g, p, g, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(n, g * g, c * p * p)

    def features_from_tokens(
        self,
        tokens: torch.Tensor,
        pe: torch.Tensor,
        keep: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Class-token feature after the final norm.

        ``tokens`` are patch embeddings ``[n, P, d]``; ``pe`` is ``[P, d]`` or a
        per-image ``[n, P, d]``; ``keep`` optionally marks surviving patches.
        """
        n = tokens.shape[0]
        if pe.shape[-2:] != self.pos_embed.shape:
            raise ContractViolation(
                f"pe shape {tuple(pe.shape)} does not match table {tuple(self.pos_embed.shape)}"
            )
        z = torch.cat([self.cls_token.expand(n, -1, -1), tokens + pe], dim=1)
        key_mask = None
        if keep is not None:
            key_mask = torch.cat([keep.new_ones(n, 1), keep], dim=1)
        for blk in self.blocks:
            z = blk(z, key_mask)
        return self.norm(z[:, 0])

    def features(self, x: torch.Tensor, pe: torch.Tensor | None = None) -> torch.Tensor:
        pe = self.pos_embed if pe is None else pe
        return self.features_from_tokens(self.patch_embed(self.patchify(x)), pe)

    def forward(self, x: torch.Tensor, pe: torch.Tensor | None = None) -> torch.Tensor:
        return _finite(self.head(self.features(x, pe)).squeeze(-1))


def _finite(e: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(e.detach()).all():
        raise NumericError("non-finite energy", location="energy")
    return e


def energy(model: EnergyModel, x: torch.Tensor) -> torch.Tensor:
    """One energy score per image, shape ``[n]``."""
    return model(x)


def energy_with_pe(model: EnergyModel, x: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
    """Energy with ``pe`` (``[P, d]`` or ``[n, P, d]``) in place of the fixed table."""
    return model(x, pe)


def edge_band_mask(patch_size: int, widths: np.ndarray, grid: int) -> np.ndarray:
    """Boolean image-layout mask that is True on the outer ``k`` pixels of each patch.

    ``widths`` has shape ``[n, grid*grid]``; result is ``[n, 1, H, W]``.
    """
    rr, cc = np.meshgrid(np.arange(patch_size), np.arange(patch_size), indexing="ij")
    dist = np.minimum(np.minimum(rr, cc), np.minimum(patch_size - 1 - rr, patch_size - 1 - cc))
    n = widths.shape[0]
    k = widths.reshape(n, grid, grid)[:, :, :, None, None]
    band = dist[None, None, None] < k  # [n, g, g, p, p]
    band = band.transpose(0, 1, 3, 2, 4).reshape(n, 1, grid * patch_size, grid * patch_size)
    return band


@dataclass
class TokenSet:
    """Patch embeddings for a batch plus the survivors of patch dropout."""

    tokens: torch.Tensor  # [n, P, d]
    keep: torch.Tensor  # [n, P] bool
    edge_widths: np.ndarray  # [n, P]

    def survivors(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.nonzero(self.keep[i]).squeeze(-1)
        return self.tokens[i, idx], idx


def patch_embed_with_regularizers(
    model: EnergyModel,
    x: torch.Tensor,
    edge_mask: EdgeMaskSpec,
    patch_dropout: float,
    rng: np.random.Generator,
) -> TokenSet:
    """Patch embedding with random edge-band zeroing and token dropout.

    Each patch draws its own band width ``k``; each patch token is then
    dropped independently with probability ``patch_dropout``. An image that
    loses every patch is redrawn until at least one survives.
    """
    if not 0.0 <= patch_dropout < 1.0:
        raise ContractViolation("patch_dropout must be in [0, 1)")
    cfg = model.config
    n, P = x.shape[0], cfg.num_patches
    widths = np.zeros((n, P), dtype=np.int64)
    if edge_mask.active:
        ks = np.array(sorted(edge_mask.k_probs))
        probs = np.array([edge_mask.k_probs[k] for k in ks])
        widths = ks[rng.choice(len(ks), size=(n, P), p=probs)]
        band = torch.from_numpy(edge_band_mask(cfg.patch_size, widths, cfg.grid))
        x = x.masked_fill(band, 0.0)
    keep = np.ones((n, P), dtype=bool)
    if patch_dropout > 0:
        keep = rng.random((n, P)) >= patch_dropout
        for i in range(n):
            while not keep[i].any():
                keep[i] = rng.random(P) >= patch_dropout
    tokens = model.patch_embed(model.patchify(x))
    return TokenSet(tokens=tokens, keep=torch.from_numpy(keep), edge_widths=widths)


def build_model(config: ViTConfig, seed: int) -> EnergyModel:
    g = torch.Generator().manual_seed(seed)
    return EnergyModel(config, generator=g)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

