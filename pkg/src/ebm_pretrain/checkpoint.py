"""Binary checkpoint format.

Layout::

    b"EBMPRE01"                      8-byte magic
    uint64 little-endian             header length H
    H bytes of UTF-8 JSON            header (sorted keys, compact)
    raw blobs                        little-endian arrays, back to back

The header holds the format version, the run config snapshot, counters, the
RNG seed and a blob directory ``[{name, shape, dtype, offset, nbytes}]`` with
offsets relative to the start of the blob section. Blob names are
``param/<model param>``, ``alpha/raw`` and ``adam_m/<name>``/``adam_v/<name>``
for the optimizer moments.

Random streams are keyed by ``(seed, stream name, epoch, batch)`` and keep no
mutable state, so the seed plus the epoch and step counters restore them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ebm_pretrain.errors import ContractViolation, CorruptCheckpointError

MAGIC = b"EBMPRE01"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    optimizer_step: int = 0
    seed: int = 0
    version: int = FORMAT_VERSION
    extra: dict[str, Any] = field(default_factory=dict)

    def params(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _as_le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind != "f" or a.dtype.itemsize not in (4, 8):
        raise ContractViolation(f"checkpoint blobs must be float32/float64, got {a.dtype}")
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.array(a, dtype=a.dtype.newbyteorder("<"), order="C")


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        le = _as_le(arr)
        raw = le.tobytes()
        directory.append({"name": name, "shape": list(le.shape), "dtype": le.dtype.str,
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": ckpt.version,
        "config": ckpt.config,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "total_steps": ckpt.total_steps,
        "optimizer_step": ckpt.optimizer_step,
        "rng": {"seed": ckpt.seed},
        "extra": ckpt.extra,
        "blobs": directory,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{source}: missing checkpoint magic")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise CorruptCheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(data[start: start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CorruptCheckpointError(f"{source}: unsupported format version {header.get('version')!r}")
    body = memoryview(data)[start + hlen:]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    try:
        for entry in header["blobs"]:
            dt = _DTYPES[entry["dtype"]]
            off, nb, shape = entry["offset"], entry["nbytes"], tuple(entry["shape"])
            if off != expected or off + nb > len(body):
                raise CorruptCheckpointError(f"{source}: blob {entry['name']!r} is truncated")
            if nb != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise CorruptCheckpointError(f"{source}: blob {entry['name']!r} size disagrees with shape")
            tensors[entry["name"]] = np.frombuffer(body[off: off + nb], dtype=dt).reshape(shape).copy()
            expected = off + nb
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{source}: malformed blob directory ({exc})") from None
    if expected != len(body):
        raise CorruptCheckpointError(f"{source}: {len(body) - expected} trailing bytes")
    return Checkpoint(
        config=header["config"],
        tensors=tensors,
        step=header["step"],
        epoch=header["epoch"],
        total_steps=header["total_steps"],
        optimizer_step=header["optimizer_step"],
        seed=header["rng"]["seed"],
        version=header["version"],
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def capture(trainer, config: dict[str, Any], seed: int) -> Checkpoint:
    """Snapshot a :class:`~ebm_pretrain.training.Pretrainer`."""
    tensors = {f"param/{k}": _np(v) for k, v in trainer.model.state_dict().items()}
    tensors["alpha/raw"] = _np(trainer.alpha.raw).reshape(())
    opt = trainer.optimizer
    for name, m, v in zip(opt.names, opt.state.exp_avg, opt.state.exp_avg_sq):
        tensors[f"adam_m/{name}"] = _np(m)
        tensors[f"adam_v/{name}"] = _np(v)
    return Checkpoint(
        config=config,
        tensors=tensors,
        step=trainer.global_step,
        epoch=trainer.epoch,
        total_steps=trainer.total_steps,
        optimizer_step=opt.state.step,
        seed=seed,
    )


def load_model_state(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model``; names and shapes must match exactly."""
    state = model.state_dict()
    missing, unexpected = set(state) - set(params), set(params) - set(state)
    if missing or unexpected:
        raise ContractViolation(
            f"checkpoint parameters do not match the model (missing {sorted(missing)}, "
            f"unexpected {sorted(unexpected)})"
        )
    for name, arr in params.items():
        if tuple(state[name].shape) != arr.shape:
            raise ContractViolation(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs model {tuple(state[name].shape)}"
            )
    with torch.no_grad():
        for name, t in state.items():
            t.copy_(torch.from_numpy(params[name]).to(t.dtype))


def alpha_raw(ckpt: Checkpoint) -> torch.Tensor:
    """The unconstrained step-size parameter as a 0-dim float64 tensor."""
    raw = ckpt.tensors.get("alpha/raw")
    if raw is None or np.asarray(raw).size != 1:
        raise ContractViolation("checkpoint has no scalar alpha/raw")
    return torch.tensor(float(np.asarray(raw).reshape(())), dtype=torch.float64)


def restore(trainer, ckpt: Checkpoint) -> None:
    """Load model, step size, optimizer moments and counters into ``trainer``."""
    load_model_state(trainer.model, ckpt.params())
    with torch.no_grad():
        trainer.alpha.raw.copy_(alpha_raw(ckpt))
    opt = trainer.optimizer
    if ckpt.optimizer_step:
        ms, vs = [], []
        for name, p in zip(opt.names, opt.params):
            m, v = ckpt.tensors.get(f"adam_m/{name}"), ckpt.tensors.get(f"adam_v/{name}")
            if m is None or v is None or m.shape != tuple(p.shape) or v.shape != tuple(p.shape):
                raise ContractViolation(f"checkpoint optimizer state missing or mis-shaped for {name}")
            ms.append(torch.from_numpy(m).to(p.dtype))
            vs.append(torch.from_numpy(v).to(p.dtype))
        opt.state.exp_avg, opt.state.exp_avg_sq = ms, vs
    opt.state.step = ckpt.optimizer_step
    trainer.global_step = ckpt.step
    trainer.epoch = ckpt.epoch
    trainer.total_steps = ckpt.total_steps
