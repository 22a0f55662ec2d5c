import math

import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ebm_pretrain import tensor_core as tc
from ebm_pretrain.corruptions import shuffle_pe
from ebm_pretrain.errors import ContractViolation, NumericError
from ebm_pretrain.models import TokenSet, energy
from ebm_pretrain.sampler import (
    SamplerConfig,
    SamplingChain,
    StepSize,
    alpha_value,
    conditional_restore,
    masked_pe_mse,
    softplus_inverse,
    sort_restore,
)
from helpers import SORT16, images, numpy_mirror, perturbed_model
from oracles import rel_err, restore_chain_oracle, sort_chain_oracle


def _params(model, alpha):
    return [p for p in model.parameters() if p.requires_grad] + [alpha.raw]


class TestChainOracle:
    @pytest.mark.parametrize("loss_kind", ["smooth_l1", "mse"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_pixel_chain(self, loss_kind, seed, f64):
        model = perturbed_model(seed=seed)
        vit = numpy_mirror(model)
        x0, target = images(3, seed=10 + seed), images(3, seed=20 + seed)
        alpha = 0.37
        chain, total = conditional_restore(model, x0, target, SamplerConfig(steps=2, loss_kind=loss_kind), alpha)
        states, losses, ref_total = restore_chain_oracle(
            vit, x0.numpy(), target.numpy(), alpha, 2, model.pe_table.detach().numpy(), loss_kind)
        assert len(chain.states) == 3
        for got, ref in zip(chain.states, states):
            assert rel_err(got, ref) <= 1e-6
        npt.assert_allclose(chain.losses, losses, rtol=1e-6)
        assert abs(float(total) - ref_total) <= 1e-6 * abs(ref_total)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_sort_chain_with_dropout(self, seed, f64):
        model = perturbed_model(SORT16, seed=seed)
        vit = numpy_mirror(model)
        x = images(2, SORT16, seed=30 + seed)
        rng = np.random.default_rng(seed)
        true = model.pe_table.detach()
        shuffled, _ = shuffle_pe(true, rng, n=2)
        keep = torch.from_numpy(rng.random((2, 16)) >= 0.5)
        keep[:, 0] = True
        tokens = TokenSet(model.patch_embed(model.patchify(x)), keep, np.zeros((2, 16), dtype=np.int64))
        chain, total = sort_restore(model, x, shuffled, true, SamplerConfig(steps=2), 0.8, tokens=tokens)
        states, losses, ref_total = sort_chain_oracle(
            vit, x.numpy(), shuffled.numpy(), true.numpy(), 0.8, 2, keep.numpy())
        for got, ref in zip(chain.states, states):
            assert rel_err(got, ref) <= 1e-6
        assert abs(float(total) - ref_total) <= 1e-6 * abs(ref_total)

    def test_chain_invariants(self, f64):
        model = perturbed_model()
        x0 = images(2)
        chain, _ = conditional_restore(model, x0, images(2, seed=3), SamplerConfig(steps=3), 0.1)
        assert torch.equal(chain.states[0], x0)
        assert len(chain.states) == 4 and len(chain.losses) == 3
        with pytest.raises(ContractViolation):
            SamplingChain([x0], [1.0], 0.1)


class TestDegenerateCases:
    def test_alpha_zero_pixel(self, f64):
        model = perturbed_model()
        x0, t = images(2), images(2, seed=5)
        cfg = SamplerConfig(steps=3)
        chain, total = conditional_restore(model, x0, t, cfg, 0.0)
        for s in chain.states:
            assert torch.equal(s, x0)
        assert float(total) == float(cfg.pixel_loss(x0, t))

    def test_n1_total_is_single_loss(self, f64):
        model = perturbed_model()
        chain, total = conditional_restore(model, images(2), images(2, seed=5), SamplerConfig(steps=1), 0.2)
        assert float(total) == chain.losses[0]

    def test_sort_alpha_zero(self, f64):
        model = perturbed_model(SORT16)
        x = images(2, SORT16)
        true = model.pe_table.detach()
        shuffled, _ = shuffle_pe(true, np.random.default_rng(0), n=2)
        _, total = sort_restore(model, x, shuffled, true, SamplerConfig(steps=2), 0.0)
        assert float(total) == float(((shuffled - true) ** 2).mean())

    def test_sort_from_true_pe(self, f64):
        model = perturbed_model(SORT16, scale=0.05)
        x = images(2, SORT16)
        true = model.pe_table.detach()
        chain, total = sort_restore(model, x, true, true, SamplerConfig(steps=2), 0.1)
        assert float(masked_pe_mse(chain.states[0], true, None)) == 0.0
        shuffled, _ = shuffle_pe(true, np.random.default_rng(1), n=2)
        assert float(total) <= float(masked_pe_mse(shuffled, true, None))

    def test_shape_mismatch(self, f64):
        model = perturbed_model()
        with pytest.raises(ContractViolation):
            conditional_restore(model, images(2), images(3), SamplerConfig(), 0.1)

    def test_non_finite_carries_step(self, f64):
        model = perturbed_model()
        x = images(1)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError) as info:
            conditional_restore(model, x, images(1), SamplerConfig(steps=2), 0.1)
        assert info.value.step == 1


class TestStopGradient:
    def test_total_gradient_is_sum_of_detached_steps(self, f64):
        model = perturbed_model(seed=3)
        alpha = StepSize(0.3)
        x0, t = images(2, seed=4), images(2, seed=5)
        cfg = SamplerConfig(steps=2)
        chain, total = conditional_restore(model, x0, t, cfg, alpha)
        params = _params(model, alpha)
        full = tc.grad(total, params)
        one = SamplerConfig(steps=1)
        parts = []
        for j in range(2):
            _, lj = conditional_restore(model, chain.states[j], t, one, alpha)
            parts.append(tc.grad(lj / 2, params))
        for f, a, b in zip(full, *parts):
            assert rel_err(f, a + b) <= 1e-5


class TestProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_single_small_step_lowers_energy(self, seed, f64):
        model = perturbed_model(seed=seed)
        x0 = images(3, seed=seed + 40)
        chain, _ = conditional_restore(model, x0, x0, SamplerConfig(steps=1), 1e-3, create_graph=False)
        e0 = energy(model, chain.states[0]).detach()
        e1 = energy(model, chain.states[1]).detach()
        assert float((e1 - e0).max()) < 1e-4

    def test_batch_permutation_invariance(self, f64):
        model = perturbed_model(seed=2)
        x0, t = images(5, seed=1), images(5, seed=2)
        perm = torch.tensor([3, 0, 4, 1, 2])
        cfg = SamplerConfig(steps=2)
        _, a = conditional_restore(model, x0, t, cfg, 0.2)
        _, b = conditional_restore(model, x0[perm], t[perm], cfg, 0.2)
        assert abs(float(a) - float(b)) <= 1e-12 * abs(float(a))

    def test_noise_off_is_deterministic(self):
        def run():
            torch.manual_seed(123)
            model = perturbed_model(scale=0.1).float()
            x = images(2, dtype=torch.float32)
            chain, total = conditional_restore(model, x, x * 0.5, SamplerConfig(), 0.1)
            return chain.states[-1], total.detach()
        (s1, t1), (s2, t2) = run(), run()
        assert torch.equal(s1, s2) and torch.equal(t1, t2)

    def test_noise_needs_rng(self, f64):
        model = perturbed_model()
        with pytest.raises(ContractViolation):
            conditional_restore(model, images(1), images(1), SamplerConfig(noise_scale=0.1), 0.1)
        a, _ = conditional_restore(model, images(1), images(1), SamplerConfig(noise_scale=0.1), 0.1,
                                   noise_rng=np.random.default_rng(0))
        b, _ = conditional_restore(model, images(1), images(1), SamplerConfig(noise_scale=0.1), 0.1,
                                   noise_rng=np.random.default_rng(0))
        assert torch.equal(a.states[-1], b.states[-1])


class TestAlpha:
    def test_init_value(self):
        assert abs(StepSize(0.1).value() - 0.1) <= 1e-9
        assert abs(alpha_value(softplus_inverse(0.1)) - 0.1) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-700, 700))
    def test_always_positive(self, raw):
        assert alpha_value(raw) > 0

    def test_derivative_at_init(self):
        a = StepSize(0.1)
        (g,) = tc.grad(a(), [a.raw])
        assert abs(float(g) - (1 - math.exp(-0.1))) <= 1e-12
        assert abs(float(g) - 0.09516) < 1e-5

    def test_frozen_alpha(self):
        assert not StepSize(0.1, learnable=False).raw.requires_grad

    @pytest.mark.parametrize("kwargs", [{"steps": 0}, {"alpha_init": 0.0}, {"loss_kind": "l1"},
                                        {"noise_scale": -1.0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ContractViolation):
            SamplerConfig(**kwargs)

    def test_alpha_zero_gives_corrupted_loss_with_learnable_param(self, f64):
        model = perturbed_model()
        x0, t = images(2), images(2, seed=9)
        a = StepSize(0.1)
        with torch.no_grad():
            a.raw.fill_(-1e4)  # softplus underflows to exactly 0
        assert float(a()) == 0.0
        _, total = conditional_restore(model, x0, t, SamplerConfig(), a)
        assert float(total) == float(tc.smooth_l1(x0, t))


class TestMaskedMse:
    def test_keep_restricts_rows(self):
        pe = torch.zeros(1, 4, 2)
        true = torch.ones(4, 2)
        pe[0, 1] = 1.0
        keep = torch.tensor([[False, True, False, False]])
        assert float(masked_pe_mse(pe, true, keep)) == 0.0
        assert float(masked_pe_mse(pe, true, None)) == 0.75
