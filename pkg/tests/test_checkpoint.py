import numpy as np
import pytest
import torch

from ebm_pretrain import checkpoint as ck
from ebm_pretrain import corruptions as cx
from ebm_pretrain.errors import ContractViolation, CorruptCheckpointError
from ebm_pretrain.models import ViTConfig, build_model
from ebm_pretrain.sampler import SamplerConfig
from ebm_pretrain.training import Pretrainer, TrainConfig
from helpers import TINY


def _trainer(config=TINY, seed=0):
    return Pretrainer(build_model(config, seed), SamplerConfig(), TrainConfig(batch_size=4, augment=False),
                      cx.DiffuseNoise(), cx.SeededRng(seed), total_steps=20)


def _trained():
    t = _trainer()
    x = torch.randn(4, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    t.train_step(x, 0, 0)
    t.train_step(x, 0, 1)
    return t


class TestFormat:
    def test_save_load_save_byte_identical(self, tmp_path):
        t = _trained()
        ckpt = ck.capture(t, {"seed": 0, "model": {"depth": 2}}, seed=0)
        ck.save_checkpoint(ckpt, tmp_path / "a.bin")
        loaded = ck.load_checkpoint(tmp_path / "a.bin")
        ck.save_checkpoint(loaded, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert loaded.step == 2 and loaded.optimizer_step == 2 and loaded.total_steps == 20

    def test_layout(self):
        ckpt = ck.Checkpoint({"a": 1}, {"w": np.arange(3, dtype="<f4")})
        data = ck.to_bytes(ckpt)
        assert data[:8] == b"EBMPRE01"
        hlen = int.from_bytes(data[8:16], "little")
        assert data[16 + hlen:] == np.arange(3, dtype="<f4").tobytes()

    def test_float64_blobs(self):
        ckpt = ck.Checkpoint({}, {"a": np.array(1.5), "b": np.ones((2, 2), dtype=np.float64)})
        back = ck.from_bytes(ck.to_bytes(ckpt))
        assert back.tensors["a"].dtype == np.float64 and back.tensors["a"].shape == ()

    def test_rejects_integer_blobs(self):
        with pytest.raises(ContractViolation):
            ck.to_bytes(ck.Checkpoint({}, {"a": np.arange(3)}))


class TestCorruption:
    @pytest.fixture
    def data(self):
        return ck.to_bytes(ck.capture(_trained(), {}, seed=0))

    def test_truncated_blobs(self, data):
        with pytest.raises(CorruptCheckpointError):
            ck.from_bytes(data[:-10])

    def test_truncated_header(self, data):
        with pytest.raises(CorruptCheckpointError):
            ck.from_bytes(data[:40])

    def test_bad_magic(self, data):
        with pytest.raises(CorruptCheckpointError):
            ck.from_bytes(b"XXXXXXXX" + data[8:])

    def test_trailing_bytes(self, data):
        with pytest.raises(CorruptCheckpointError):
            ck.from_bytes(data + b"\0")

    def test_truncated_file(self, data, tmp_path):
        p = tmp_path / "t.bin"
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpointError) as info:
            ck.load_checkpoint(p)
        assert "t.bin" in str(info.value)

    def test_bad_version(self):
        data = ck.to_bytes(ck.Checkpoint({}, {}, version=9))
        with pytest.raises(CorruptCheckpointError):
            ck.from_bytes(data)


class TestRestore:
    def test_restore_reproduces_training(self):
        x = torch.randn(4, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        t = _trained()
        ckpt = ck.from_bytes(ck.to_bytes(ck.capture(t, {}, seed=0)))
        m_ref = t.train_step(x, 1, 0)
        fresh = _trainer(seed=0)
        ck.restore(fresh, ckpt)
        m_new = fresh.train_step(x, 1, 0)
        assert m_ref == m_new
        for a, b in zip(t.optimizer.params, fresh.optimizer.params):
            assert torch.equal(a, b)

    def test_shape_mismatch_is_error(self):
        ckpt = ck.capture(_trained(), {}, seed=0)
        other = build_model(ViTConfig(image_size=8, patch_size=4, embed_dim=32, depth=2, heads=2), 0)
        with pytest.raises(ContractViolation):
            ck.load_model_state(other, ckpt.params())

    def test_missing_names_is_error(self):
        ckpt = ck.capture(_trained(), {}, seed=0)
        deeper = build_model(ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=3, heads=2), 0)
        with pytest.raises(ContractViolation):
            ck.load_model_state(deeper, ckpt.params())

    def test_alpha_raw(self):
        t = _trained()
        ckpt = ck.capture(t, {}, seed=0)
        raw = ck.alpha_raw(ckpt)
        assert raw.dtype == torch.float64 and raw.shape == ()
        assert float(raw) == float(t.alpha.raw)

    def test_micro_parameter_count(self):
        cfg = ViTConfig()
        t = _trainer(cfg)
        ckpt = ck.from_bytes(ck.to_bytes(ck.capture(t, {}, seed=0)))
        assert sum(v.size for v in ckpt.params().values()) == cfg.num_parameters()
