"""Small shared builders for the test suite."""

import torch

from ebm_pretrain.models import EnergyModel, ViTConfig
from oracles import NumpyViT

TINY = ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2)
SORT16 = ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=1, heads=2)


def perturbed_model(config: ViTConfig = TINY, seed: int = 0, scale: float = 0.3) -> EnergyModel:
    """A float64 model whose weights are far enough from init that gradients are not tiny.

    Call under float64 default dtype; the fixed PE table is left untouched.
    """
    g = torch.Generator().manual_seed(seed)
    model = EnergyModel(config, generator=g).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "pos_embed":
                continue
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def numpy_mirror(model: EnergyModel) -> NumpyViT:
    state = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    return NumpyViT(state, model.config.patch_size, model.config.heads)


def images(n: int, config: ViTConfig = TINY, seed: int = 1, dtype=torch.float64) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, config.in_chans, config.image_size, config.image_size, generator=g, dtype=dtype)
