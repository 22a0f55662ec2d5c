import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from ebm_pretrain import corruptions as cx
from ebm_pretrain.errors import ContractViolation, NumericError
from ebm_pretrain.models import build_model
from ebm_pretrain.sampler import SamplerConfig
from ebm_pretrain.training import (
    AdamW,
    AdamWHyper,
    AdamWState,
    Pretrainer,
    SortConfig,
    TrainConfig,
    adamw_update,
    augment,
    cosine_lr,
    is_scale_param,
    pretrain_no_decay,
)
from helpers import SORT16, TINY
from oracles import adamw_scalar


def _trainer(spec=None, config=TINY, **train_kw):
    kw = dict(batch_size=4, epochs=2, augment=False)
    kw.update(train_kw)
    model = build_model(config, 0)
    return Pretrainer(model, SamplerConfig(), TrainConfig(**kw), spec or cx.DiffuseNoise(),
                      cx.SeededRng(0), total_steps=10)


def _data(n=8, config=TINY, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, config.image_size, config.image_size, generator=g)


class TestAdamW:
    @pytest.mark.parametrize("wd", [0.0, 0.05])
    def test_five_steps_match_scalar_oracle(self, wd):
        p0, lr, b1, b2, eps = 1.7, 0.05, 0.9, 0.95, 1e-8
        grad_fn = lambda p: 2.0 * (p - 3.0)  # noqa: E731  quadratic (p - 3)^2
        ref = adamw_scalar(p0, grad_fn, lr, b1, b2, eps, wd)
        p = torch.tensor([p0], dtype=torch.float64)
        state = AdamWState()
        got = []
        for _ in range(5):
            g = 2.0 * (p - 3.0)
            adamw_update([p], [g.clone()], state, AdamWHyper(lr, b1, b2, eps, wd))
            got.append(float(p))
        npt.assert_allclose(got, ref, rtol=1e-6)

    def test_zero_grad_zero_decay_leaves_params(self):
        p = torch.randn(5, dtype=torch.float64)
        before = p.clone()
        adamw_update([p], [torch.zeros(5, dtype=torch.float64)], AdamWState(), AdamWHyper(0.1, weight_decay=0.0))
        assert torch.equal(p, before)

    def test_first_step_magnitude_is_lr(self):
        p = torch.zeros(4, dtype=torch.float64)
        g = torch.tensor([0.3, -2.0, 5e-3, 40.0], dtype=torch.float64)
        adamw_update([p], [g], AdamWState(), AdamWHyper(1e-2, weight_decay=0.0))
        npt.assert_allclose(p.numpy(), -1e-2 * np.sign(g.numpy()), rtol=1e-5)

    def test_decay_exemption_and_lr_scale(self):
        a = torch.ones(2, dtype=torch.float64)
        b = torch.ones(2, dtype=torch.float64)
        z = torch.zeros(2, dtype=torch.float64)
        adamw_update([a, b], [z, z.clone()], AdamWState(), AdamWHyper(0.1, weight_decay=0.5),
                     decay=[True, False], lr_scale=[2.0, 1.0])
        npt.assert_allclose(a.numpy(), 1 - 0.2 * 0.5)
        assert torch.equal(b, torch.ones(2, dtype=torch.float64))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            adamw_update([torch.zeros(2)], [torch.zeros(3)], AdamWState(), AdamWHyper(0.1))

    def test_group_rules(self):
        assert pretrain_no_decay("alpha.raw")
        assert pretrain_no_decay("model.blocks.0.norm1.weight")
        assert pretrain_no_decay("model.norm.bias")
        assert not pretrain_no_decay("model.blocks.0.qkv.weight")
        assert is_scale_param("model.head.weight") and is_scale_param("alpha.raw")
        assert not is_scale_param("model.patch_embed.weight")

    def test_trainer_groups(self):
        t = _trainer()
        names = t.optimizer.names
        assert "alpha.raw" in names and "model.pos_embed" not in names
        scale = dict(zip(names, t.optimizer.lr_scale))
        assert scale["model.head.weight"] == 100.0 and scale["model.blocks.0.fc1.weight"] == 1.0
        decay = dict(zip(names, t.optimizer.decay))
        assert not decay["alpha.raw"] and decay["model.head.weight"]


class TestSchedule:
    def test_warmup_then_cosine(self):
        total, base = 100, 1.0
        lrs = [cosine_lr(s, total, base, 0.05) for s in range(total)]
        npt.assert_allclose(lrs[:5], [0.2, 0.4, 0.6, 0.8, 1.0])
        assert lrs[5] == pytest.approx(1.0)
        assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
        assert lrs[-1] < 1e-3
        assert cosine_lr(50 + 2, total, base, 0.05) == pytest.approx(0.5 * (1 + math.cos(math.pi * 47 / 95)))

    @pytest.mark.parametrize("kw", [{"base_lr": -1.0}, {"warmup_frac": 1.5}, {"batch_size": 0},
                                    {"scale_lr_mult": 0.0}, {"beta2": 1.0}, {"precision": "float16"}])
    def test_config_validation(self, kw):
        with pytest.raises(ContractViolation):
            TrainConfig(**kw)

    def test_sort_config_validation(self):
        with pytest.raises(ContractViolation):
            SortConfig(patch_dropout=1.0)
        with pytest.raises(ContractViolation):
            SortConfig(edge_k_probs={1: 0.2})


class TestTrainStep:
    def test_lr_zero_leaves_parameters_bit_identical(self):
        t = _trainer(base_lr=0.0)
        before = [p.detach().clone() for p in t.optimizer.params]
        m = t.train_step(_data(), 0, 0)
        assert math.isfinite(m.loss) and m.grad_norm > 0
        for a, b in zip(before, t.optimizer.params):
            assert torch.equal(a, b.detach())

    def test_identical_seeds_identical_metrics(self):
        runs = []
        for _ in range(2):
            t = _trainer(augment=True)
            runs.append([t.train_step(_data(), 0, b) for b in range(3)])
        for a, b in zip(*runs):
            assert a == b

    def test_step_updates_and_counts(self):
        t = _trainer()
        before = t.model.head.weight.detach().clone()
        m = t.train_step(_data(), 0, 0)
        assert t.global_step == 1 and m.step == 0
        assert not torch.equal(before, t.model.head.weight.detach())
        assert len(m.per_step_losses) == 2 and m.alpha > 0

    def test_rollback_on_non_finite(self):
        t = _trainer()
        t.train_step(_data(), 0, 0)
        snap = [p.detach().clone() for p in t.optimizer.params]
        opt_step = t.optimizer.state.step
        bad = _data()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            t.train_step(bad, 0, 1)
        for a, b in zip(snap, t.optimizer.params):
            assert torch.equal(a, b.detach())
        assert t.optimizer.state.step == opt_step and t.global_step == 1

    def test_fit_records_rollbacks_and_continues(self):
        t = _trainer(epochs=1)
        x = _data(8)
        x[5, 1, 2, 3] = float("inf")
        hist = t.fit(x)
        assert sum(hist.rollbacks) == 1 and len(hist.errors) == 1
        assert len(hist.steps) == 2 and math.isfinite(hist.epoch_loss[0])

    def test_sorting_step(self):
        t = _trainer(cx.ShufflePE(), config=SORT16)
        m = t.train_step(_data(4, SORT16), 0, 0)
        assert math.isfinite(m.loss) and m.loss > 0

    def test_fit_extends_total_steps(self):
        t = _trainer(epochs=2)
        t.fit(_data(8))
        assert t.total_steps == 10 and t.epoch == 2 and t.global_step == 4


class TestAugment:
    def test_shape_and_determinism(self):
        x = _data(6)
        a = augment(x, np.random.default_rng(0))
        b = augment(x, np.random.default_rng(0))
        assert a.shape == x.shape and torch.equal(a, b)

    def test_pixels_come_from_source(self):
        x = torch.arange(2 * 3 * 8 * 8, dtype=torch.float32).reshape(2, 3, 8, 8)
        out = augment(x, np.random.default_rng(1))
        for i in range(2):
            assert set(out[i].unique().tolist()) <= set(x[i].unique().tolist())


class TestOptimizerSnapshot:
    def test_restore_roundtrip(self):
        t = _trainer()
        t.train_step(_data(), 0, 0)
        snap = t.optimizer.snapshot()
        t.train_step(_data(), 0, 1)
        t.optimizer.restore(snap)
        assert t.optimizer.state.step == 1
        for p, s in zip(t.optimizer.params, snap[0]):
            assert torch.equal(p.detach(), s)
        assert isinstance(t.optimizer, AdamW)
