"""Datasets: synthetic shape images, PNG class folders, normalization stats."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ebm_pretrain.errors import ContractViolation

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "bar", "saltire")


@dataclass(frozen=True)
class SyntheticDataset:
    n_per_class: int = 64
    classes: int = 4
    image_size: int = 32
    seed: int = 0
    palette_strength: float = 0.8
    kind = "synthetic"


@dataclass(frozen=True)
class FolderDataset:
    root: str
    image_size: int = 32
    kind = "folder"


DatasetDescriptor = SyntheticDataset | FolderDataset


@dataclass
class LabeledImages:
    images: np.ndarray  # uint8 [n, h, w, 3]
    labels: np.ndarray  # int64 [n]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.class_names)

    def pixels(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        """``[n, 3, h, w]`` floats in [0, 1]."""
        x = torch.from_numpy(self.images.transpose(0, 3, 1, 2).astype(np.float64) / 255.0)
        return x.to(dtype or torch.get_default_dtype())


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std in [0, 1] pixel units."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @classmethod
    def compute(cls, images: np.ndarray) -> "NormStats":
        x = images.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        if np.any(std <= 0):
            raise ContractViolation("a channel has zero variance; cannot standardize")
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def _shape(self, x: torch.Tensor):
        m = torch.tensor(self.mean, dtype=x.dtype).reshape(1, 3, 1, 1)
        s = torch.tensor(self.std, dtype=x.dtype).reshape(1, 3, 1, 1)
        return m, s

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._shape(x)
        return (x - m) / s

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._shape(x)
        return x * s + m

    def to_json(self) -> str:
        return json.dumps({"mean": list(self.mean), "std": list(self.std)}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        return cls(tuple(map(float, d["mean"])), tuple(map(float, d["std"])))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape, via ``ss``x supersampling."""
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "circle":
        m = dx**2 + dy**2 <= r**2
    elif kind == "square":
        m = np.maximum(adx, ady) <= 0.85 * r
    elif kind == "triangle":
        t = (dy + r) / (1.8 * r)
        m = (t >= 0) & (t <= 1) & (adx <= t * r)
    elif kind == "cross":
        m = ((adx <= 0.3 * r) & (ady <= r)) | ((ady <= 0.3 * r) & (adx <= r))
    elif kind == "diamond":
        m = adx + ady <= r
    elif kind == "ring":
        d2 = dx**2 + dy**2
        m = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif kind == "bar":
        m = (adx <= r) & (ady <= 0.35 * r)
    elif kind == "saltire":
        u, v = np.abs(dx - dy) / np.sqrt(2), np.abs(dx + dy) / np.sqrt(2)
        m = ((u <= 0.3 * r) & (v <= r)) | ((v <= 0.3 * r) & (u <= r))
    else:
        raise ContractViolation(f"unknown shape {kind!r}")
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def render_shape_image(label: int, classes: int, size: int, rng: np.random.Generator,
                       palette_strength: float) -> np.ndarray:
    base = label / classes
    if rng.random() < palette_strength:
        fg_h = base + rng.uniform(-0.08, 0.08)
        bg_h = base + 0.5 + rng.uniform(-0.08, 0.08)
    else:
        fg_h, bg_h = rng.uniform(0, 1, size=2)
    fg = _hsv(fg_h, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))
    bg = _hsv(bg_h, rng.uniform(0.3, 0.8), rng.uniform(0.15, 0.55))
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(0.5 * size - 0.15 * size, 0.5 * size + 0.15 * size, size=2)
    cover = _shape_mask(SHAPES[label], size, cy, cx, r)[..., None]
    img = cover * fg + (1 - cover) * bg
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def gen_synthetic(desc: SyntheticDataset, rng: np.random.Generator | None = None) -> LabeledImages:
    """Render ``n_per_class`` shape images per class; class = shape kind."""
    if not 2 <= desc.classes <= len(SHAPES):
        raise ContractViolation(f"classes must be in 2..{len(SHAPES)}")
    if desc.n_per_class < 1:
        raise ContractViolation("n_per_class must be >= 1")
    if rng is None:
        rng = np.random.default_rng(desc.seed)
    images, labels = [], []
    for label in range(desc.classes):
        for _ in range(desc.n_per_class):
            images.append(render_shape_image(label, desc.classes, desc.image_size, rng,
                                             desc.palette_strength))
            labels.append(label)
    return LabeledImages(np.stack(images), np.array(labels, dtype=np.int64),
                         list(SHAPES[: desc.classes]))


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG")


def read_png(path: Path, image_size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BICUBIC)
        return np.asarray(im, dtype=np.uint8).copy()


def save_folder(data: LabeledImages, root: Path) -> None:
    """Write ``root/<class>/<index>.png`` for every image."""
    root = Path(root)
    for name in data.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        write_png(root / data.class_names[label] / f"{i:06d}.png", img)


def load_folder(desc: FolderDataset) -> LabeledImages:
    root = Path(desc.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.glob("*.png")):
            images.append(read_png(f, desc.image_size))
            labels.append(label)
    if not images:
        raise FileNotFoundError(f"no PNG images under {root}")
    return LabeledImages(np.stack(images), np.array(labels, dtype=np.int64),
                         [d.name for d in class_dirs])


def load_dataset(desc: DatasetDescriptor) -> LabeledImages:
    if isinstance(desc, SyntheticDataset):
        return gen_synthetic(desc)
    return load_folder(desc)


def split(data: LabeledImages, heldout_fraction: float, rng: np.random.Generator):
    """Stratified train/held-out split."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ContractViolation("heldout_fraction must be in (0, 1)")
    train_idx, test_idx = [], []
    for label in np.unique(data.labels):
        idx = np.nonzero(data.labels == label)[0]
        idx = idx[rng.permutation(len(idx))]
        k = max(1, int(round(heldout_fraction * len(idx))))
        test_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return data.subset(np.sort(np.array(train_idx))), data.subset(np.sort(np.array(test_idx)))
