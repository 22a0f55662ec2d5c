"""Run configuration: a JSON document with one section per sub-config.

Schema (every key optional; omitted keys take their defaults)::

    {
      "seed": 0,
      "output_dir": "runs/default",
      "heldout_fraction": 0.25,
      "model":      {"image_size", "patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "in_chans"},
      "sampler":    {"N", "alpha_init", "alpha_learnable", "noise_scale", "loss_kind", "smooth_l1_beta"},
      "trainer":    {"base_lr", "beta1", "beta2", "weight_decay", "eps", "warmup_frac", "batch_size",
                     "epochs", "precision", "checkpoint_every", "augment", "scale_lr_mult"},
      "sort":       {"edge_k_probs", "edge_mask", "patch_dropout"},
      "corruption": {"kind": ..., <kind-specific keys>},
      "dataset":    {"kind": "synthetic", "n_per_class", "classes", "image_size", "seed", "palette_strength"}
                  | {"kind": "folder", "root", "image_size"},
      "probe":      {"epochs", "lr", "batch_size", "seed"},
      "finetune":   {"epochs", "lr", "beta2", "weight_decay", "warmup_frac", "batch_size", "seed"}
    }

Unknown keys anywhere are rejected. ``--set a.b=value`` overrides are
applied to the raw document before validation; ``value`` is read as JSON
when it parses and as a bare string otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ebm_pretrain import corruptions as cx
from ebm_pretrain.data import FolderDataset, SyntheticDataset
from ebm_pretrain.errors import ConfigError, ContractViolation
from ebm_pretrain.evaluation import FinetuneConfig, ProbeConfig
from ebm_pretrain.models import ViTConfig
from ebm_pretrain.sampler import SamplerConfig
from ebm_pretrain.training import SortConfig, TrainConfig

# JSON key -> dataclass field, where they differ
_ALIASES = {"sampler": {"N": "steps"}}


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sort: SortConfig = field(default_factory=SortConfig)
    corruption: cx.CorruptionSpec = field(default_factory=cx.DiffuseNoise)
    dataset: SyntheticDataset | FolderDataset = field(default_factory=SyntheticDataset)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    heldout_fraction: float = 0.25
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.dataset.image_size != self.model.image_size:
            raise ConfigError(
                f"dataset.image_size ({self.dataset.image_size}) != model.image_size "
                f"({self.model.image_size})"
            )
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must be in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "heldout_fraction": self.heldout_fraction,
        }
        for name in ("model", "sampler", "trainer", "sort", "probe", "finetune"):
            out[name] = _section_to_dict(name, getattr(self, name))
        out["corruption"] = cx.spec_to_dict(self.corruption)
        ds = _section_to_dict("dataset", self.dataset)
        out["dataset"] = {"kind": self.dataset.kind, **ds}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section_to_dict(section: str, obj) -> dict[str, Any]:
    rev = {v: k for k, v in _ALIASES.get(section, {}).items()}
    out = {}
    for f in dataclasses.fields(obj):
        if section == "model" and f.name == "class_token":
            continue
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = list(value)
        elif isinstance(value, dict):
            value = {str(k): v for k, v in value.items()}
        out[rev.get(f.name, f.name)] = value
    return out


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        kt, vt = args
        out = {}
        for k, v in value.items():
            try:
                key = kt(k)
            except ValueError:
                raise ConfigError(f"{path}: bad key {k!r}") from None
            out[key] = _coerce(v, vt, f"{path}.{k}")
        return out
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _parse_section(cls, raw: Any, section: str, skip: tuple[str, ...] = ()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {raw!r}")
    aliases = _ALIASES.get(section, {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init and f.name not in skip}
    shadowed = set(aliases.values())
    kwargs = {}
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in names or (key in shadowed and key not in aliases):
            raise ConfigError(f"unknown key '{section}.{key}'")
        kwargs[name] = _coerce(value, hints[name], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except ContractViolation as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _parse_dataset(raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"dataset: expected an object, got {raw!r}")
    raw = dict(raw)
    kind = raw.pop("kind", "synthetic")
    if kind == "synthetic":
        return _parse_section(SyntheticDataset, raw, "dataset")
    if kind == "folder":
        if "root" not in raw:
            raise ConfigError("dataset.root is required for a folder dataset")
        return _parse_section(FolderDataset, raw, "dataset")
    raise ConfigError(f"dataset.kind must be 'synthetic' or 'folder', got {kind!r}")


_TOP_LEVEL = {"seed", "output_dir", "heldout_fraction", "model", "sampler", "trainer", "sort",
              "corruption", "dataset", "probe", "finetune"}


def from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    kwargs: dict[str, Any] = {}
    sections = {"model": ViTConfig, "sampler": SamplerConfig, "trainer": TrainConfig,
                "sort": SortConfig, "probe": ProbeConfig, "finetune": FinetuneConfig}
    for name, cls in sections.items():
        if name in raw:
            skip = ("class_token",) if name == "model" else ()
            kwargs[name] = _parse_section(cls, raw[name], name, skip)
    if "corruption" in raw:
        try:
            kwargs["corruption"] = cx.spec_from_dict(raw["corruption"])
        except ContractViolation as exc:
            raise ConfigError(f"corruption: {exc}") from None
        except (TypeError, AttributeError) as exc:
            raise ConfigError(f"corruption: malformed ({exc})") from None
    if "dataset" in raw:
        kwargs["dataset"] = _parse_dataset(raw["dataset"])
    kwargs["seed"] = _coerce(raw.get("seed", 0), int, "seed")
    kwargs["output_dir"] = _coerce(raw.get("output_dir", "runs/default"), str, "output_dir")
    kwargs["heldout_fraction"] = _coerce(raw.get("heldout_fraction", 0.25), float, "heldout_fraction")
    return RunConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"a.b=1"`` -> ``(["a", "b"], 1)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return parts, parsed


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        parts, value = parse_override(text)
        node = raw
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: '{p}' is not a section")
            node = child
        node[parts[-1]] = value
    return raw


def load_raw(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw = load_raw(path) if path is not None else {}
    return from_dict(apply_overrides(raw, overrides or []))
