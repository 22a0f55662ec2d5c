"""Seeded corruption functions producing the initial restoration state.

All pixel corruptions operate on normalized ``[n, c, h, w]`` batches and are
pure functions of (input, parameters, generator state). The mask value is 0
in normalized space.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
import torch

from ebm_pretrain.errors import ContractViolation

MASK_VALUE = 0.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class SeededRng:
    """Named, independently keyed random streams derived from one 64-bit seed.

    ``stream("corruption", epoch, batch)`` always returns a generator in the
    same initial state, no matter what other streams have consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(zlib.crc32(name.encode()), *map(int, keys))
        )
        return np.random.Generator(np.random.PCG64(ss))

    def torch_seed(self, name: str, *keys: int) -> int:
        return int(self.stream(name, *keys).integers(0, 2**63 - 1))


# --- corruption specs -----------------------------------------------------


@dataclass(frozen=True)
class GriddedMask:
    patch_px: int = 4
    ratio: float = 0.7
    kind = "gridded_mask"

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ContractViolation("ratio must be in (0, 1]")
        if self.patch_px < 1:
            raise ContractViolation("patch_px must be >= 1")


@dataclass(frozen=True)
class RandomMask:
    count: int = 75
    area_range: tuple[float, float] = (0.01, 0.025)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    kind = "random_mask"

    def __post_init__(self):
        if self.count < 1:
            raise ContractViolation("count must be >= 1")
        lo, hi = self.area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ContractViolation("area_range must lie inside (0, 1)")
        alo, ahi = self.aspect_range
        if not (0.0 < alo <= ahi):
            raise ContractViolation("aspect_range must be positive and ordered")


RANDOM_SMALL = RandomMask(count=75, area_range=(0.01, 0.025))
RANDOM_LARGE = RandomMask(count=25, area_range=(0.02, 0.05))


@dataclass(frozen=True)
class SuperRes:
    factor: int = 4
    kind = "super_res"

    def __post_init__(self):
        if self.factor < 2:
            raise ContractViolation("super-resolution factor must be >= 2")


@dataclass(frozen=True)
class DiffuseNoise:
    kind = "diffuse_noise"


@dataclass(frozen=True)
class Grayscale:
    kind = "grayscale"


@dataclass(frozen=True)
class ShufflePE:
    kind = "shuffle_pe"


PixelSpec = Union[GriddedMask, RandomMask, SuperRes, DiffuseNoise, Grayscale]


@dataclass(frozen=True)
class Mixed:
    """Independent per-image choice among pixel corruptions."""

    components: tuple[tuple[PixelSpec, float], ...] = field(
        default_factory=lambda: (
            (GriddedMask(patch_px=4, ratio=0.7), 0.25),
            (SuperRes(factor=4), 0.25),
            (DiffuseNoise(), 0.25),
            (Grayscale(), 0.25),
        )
    )
    kind = "mixed"

    def __post_init__(self):
        if not self.components:
            raise ContractViolation("Mixed needs at least one component")
        weights = [w for _, w in self.components]
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ContractViolation("Mixed weights must be >= 0 and sum to 1")
        for spec, _ in self.components:
            if isinstance(spec, (Mixed, ShufflePE)):
                raise ContractViolation("Mixed components must be pixel corruptions")


CorruptionSpec = Union[GriddedMask, RandomMask, SuperRes, DiffuseNoise, Grayscale, ShufflePE, Mixed]

_SPEC_TYPES = {
    cls.kind: cls for cls in (GriddedMask, RandomMask, SuperRes, DiffuseNoise, Grayscale, ShufflePE, Mixed)
}


def spec_to_dict(spec: CorruptionSpec) -> dict[str, Any]:
    if isinstance(spec, Mixed):
        return {
            "kind": "mixed",
            "components": [
                {"spec": spec_to_dict(s), "weight": w} for s, w in spec.components
            ],
        }
    out: dict[str, Any] = {"kind": spec.kind}
    for name in spec.__dataclass_fields__:
        value = getattr(spec, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def spec_from_dict(d: dict[str, Any]) -> CorruptionSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _SPEC_TYPES:
        raise ContractViolation(f"unknown corruption kind {kind!r}; expected one of {sorted(_SPEC_TYPES)}")
    cls = _SPEC_TYPES[kind]
    if cls is Mixed:
        comps = d.pop("components", None)
        if d:
            raise ContractViolation(f"unknown keys for mixed: {sorted(d)}")
        if comps is None:
            return Mixed()
        parsed = []
        for c in comps:
            extra = set(c) - {"spec", "weight"}
            if extra:
                raise ContractViolation(f"unknown keys in mixed component: {sorted(extra)}")
            parsed.append((spec_from_dict(c["spec"]), float(c["weight"])))
        return Mixed(components=tuple(parsed))
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ContractViolation(f"unknown keys for {kind}: {sorted(unknown)}")
    for key in ("area_range", "aspect_range"):
        if key in d:
            d[key] = tuple(float(v) for v in d[key])
    return cls(**d)


# --- pixel corruptions ----------------------------------------------------


def mask_gridded(
    x: torch.Tensor, patch_px: int, ratio: float, rng: np.random.Generator
) -> torch.Tensor:
    """Zero exactly ``round(ratio * cells)`` grid cells per image, chosen uniformly."""
    n, _, h, w = x.shape
    if h % patch_px or w % patch_px:
        raise ContractViolation("image size must be divisible by patch_px")
    gh, gw = h // patch_px, w // patch_px
    cells = gh * gw
    count = int(round(ratio * cells))
    if count < 1:
        raise ContractViolation("mask ratio selects zero patches")
    order = np.argsort(rng.random((n, cells)), axis=1)[:, :count]
    cell_mask = np.zeros((n, cells), dtype=bool)
    np.put_along_axis(cell_mask, order, True, axis=1)
    pix = cell_mask.reshape(n, gh, 1, gw, 1)
    pix = np.broadcast_to(pix, (n, gh, patch_px, gw, patch_px)).reshape(n, 1, h, w)
    return x.masked_fill(torch.from_numpy(np.ascontiguousarray(pix)), MASK_VALUE)


def random_rectangles(
    h: int, w: int, count: int, area_range, aspect_range, rng: np.random.Generator
) -> list[tuple[int, int, int, int]]:
    """``count`` (top, left, height, width) boxes with area/aspect drawn uniformly."""
    boxes = []
    for _ in range(count):
        area = rng.uniform(*area_range)
        aspect = rng.uniform(*aspect_range)
        bh = int(round(np.sqrt(area * h * w * aspect)))
        bw = int(round(np.sqrt(area * h * w / aspect)))
        bh = min(max(bh, 1), h)
        bw = min(max(bw, 1), w)
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        boxes.append((top, left, bh, bw))
    return boxes


def mask_random(
    x: torch.Tensor,
    count: int,
    area_range,
    aspect_range,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Blank ``count`` possibly overlapping rectangles per image."""
    if count < 1:
        raise ContractViolation("count must be >= 1")
    n, _, h, w = x.shape
    mask = np.zeros((n, 1, h, w), dtype=bool)
    for i in range(n):
        for top, left, bh, bw in random_rectangles(h, w, count, area_range, aspect_range, rng):
            mask[i, 0, top:top + bh, left:left + bw] = True
    return x.masked_fill(torch.from_numpy(mask), MASK_VALUE)


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(size_in: int, size_out: int) -> np.ndarray:
    """``[size_out, size_in]`` resampling matrix (Catmull-Rom, edge-clamped taps)."""
    scale = size_in / size_out
    m = np.zeros((size_out, size_in))
    for i in range(size_out):
        u = (i + 0.5) * scale - 0.5
        base = int(np.floor(u))
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), size_in - 1)] += _cubic_weight(np.array(u - tap))
    return m


def downsample_sr(x: torch.Tensor, s: int) -> torch.Tensor:
    """Bicubic downsample by ``s`` then nearest-neighbour upsample back."""
    if s < 2:
        raise ContractViolation("super-resolution factor must be >= 2")
    _, _, h, w = x.shape
    if h % s or w % s:
        raise ContractViolation(f"factor {s} must divide image size {h}x{w}")
    mh = torch.from_numpy(bicubic_matrix(h, h // s)).to(x.dtype)
    mw = torch.from_numpy(bicubic_matrix(w, w // s)).to(x.dtype)
    low = torch.einsum("ih,nchw,jw->ncij", mh, x, mw)
    return low.repeat_interleave(s, dim=2).repeat_interleave(s, dim=3)


def noise_diffuse(
    x: torch.Tensor, rng: np.random.Generator, gamma: np.ndarray | float | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """``sqrt(g) x + sqrt(1-g) eps`` with per-image ``g ~ U(0, 1)`` unless forced."""
    n = x.shape[0]
    if gamma is None:
        gamma = rng.uniform(0.0, 1.0, size=n)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    eps = torch.from_numpy(rng.standard_normal(x.shape)).to(x.dtype)
    g = torch.from_numpy(np.array(gamma)).to(x.dtype).reshape(n, 1, 1, 1)
    return torch.sqrt(g) * x + torch.sqrt(1.0 - g) * eps, g.reshape(n)


def grayscale(x: torch.Tensor, stats=None) -> torch.Tensor:
    """Replace every channel with luminance, computed in [0, 1] pixel space.

    ``stats`` (a :class:`~ebm_pretrain.data.NormStats`) maps between
    normalized and pixel space; without it ``x`` is taken as pixel space.
    """
    if x.shape[1] != 3:
        raise ContractViolation(f"grayscale needs 3 channels, got {x.shape[1]}")
    raw = x if stats is None else stats.denormalize(x)
    wts = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype).reshape(1, 3, 1, 1)
    y = (raw * wts).sum(dim=1, keepdim=True).expand_as(raw)
    return y.clone() if stats is None else stats.normalize(y)


def shuffle_pe(
    pe_table: torch.Tensor, rng: np.random.Generator, n: int | None = None
) -> tuple[torch.Tensor, np.ndarray]:
    """Permute PE rows uniformly at random.

    Returns ``(shuffled, perm)`` with ``shuffled[..., r, :] = pe_table[perm[..., r], :]``.
    With ``n`` given, each of ``n`` images gets its own permutation.
    """
    if pe_table.dim() != 2:
        raise ContractViolation("pe_table must be rank 2")
    rows = pe_table.shape[0]
    if n is None:
        perm = rng.permutation(rows)
    else:
        perm = np.stack([rng.permutation(rows) for _ in range(n)])
    return pe_table[torch.from_numpy(perm)], perm


# --- dispatch -------------------------------------------------------------


@dataclass
class CorruptedBatch:
    pixels: torch.Tensor
    kinds: list[str]
    params: list[dict[str, Any]]
    pe: torch.Tensor | None = None
    permutation: np.ndarray | None = None


def _apply_pixel(spec: PixelSpec, x: torch.Tensor, rng, stats) -> tuple[torch.Tensor, list[dict]]:
    n = x.shape[0]
    if isinstance(spec, GriddedMask):
        return mask_gridded(x, spec.patch_px, spec.ratio, rng), [{}] * n
    if isinstance(spec, RandomMask):
        return mask_random(x, spec.count, spec.area_range, spec.aspect_range, rng), [{}] * n
    if isinstance(spec, SuperRes):
        return downsample_sr(x, spec.factor), [{}] * n
    if isinstance(spec, DiffuseNoise):
        out, gamma = noise_diffuse(x, rng)
        return out, [{"gamma": float(g)} for g in gamma]
    if isinstance(spec, Grayscale):
        return grayscale(x, stats), [{}] * n
    raise ContractViolation(f"not a pixel corruption: {spec!r}")


def apply(
    spec: CorruptionSpec,
    x: torch.Tensor,
    rng: np.random.Generator,
    stats=None,
    pe_table: torch.Tensor | None = None,
) -> CorruptedBatch:
    """Corrupt a batch according to ``spec`` and record what was done per image."""
    n = x.shape[0]
    if isinstance(spec, ShufflePE):
        if pe_table is None:
            raise ContractViolation("shuffle_pe needs the model's pe_table")
        pe, perm = shuffle_pe(pe_table, rng, n=n)
        return CorruptedBatch(x, ["shuffle_pe"] * n, [{} for _ in range(n)], pe=pe, permutation=perm)
    if isinstance(spec, Mixed):
        # choices come from a spawned child so the parent stream feeds the
        # sub-corruptions exactly as if they were applied directly
        chooser = rng.spawn(1)[0]
        weights = np.array([w for _, w in spec.components])
        choice = chooser.choice(len(weights), size=n, p=weights)
        out = x.clone()
        kinds: list[str] = [""] * n
        params: list[dict[str, Any]] = [{} for _ in range(n)]
        for c, (sub, _) in enumerate(spec.components):
            idx = np.nonzero(choice == c)[0]
            if idx.size == 0:
                continue
            sub_out, sub_params = _apply_pixel(sub, x[torch.from_numpy(idx)], rng, stats)
            out[torch.from_numpy(idx)] = sub_out
            for j, i in enumerate(idx):
                kinds[i] = sub.kind
                params[i] = dict(sub_params[j])
        return CorruptedBatch(out, kinds, params)
    pixels, params = _apply_pixel(spec, x, rng, stats)
    return CorruptedBatch(pixels, [spec.kind] * n, [dict(p) for p in params])
