import math

import numpy as np
import pytest

from config import MODEL_VARIANTS
from packages.data_storage.bag_io import Bag
from packages.experts.static_experts import static_encode
from packages.helpers.errors import ConfigError, ContractError, DimensionError
from packages.model.moe_mamba_mil import (
    AttentionPool, MoEMambaBlock, attention_pool, build_variant, expected_parameter_count, forward, moe_mamba_block,
)
from packages.numerics import functional as F
from packages.numerics.gradcheck import check_gradients
from packages.numerics.tensor import Tensor
from packages.trainer.trainer import total_loss
from tests.helpers import fixture_bag, tiny_model_config


@pytest.fixture
def cfg():
    return tiny_model_config()


@pytest.fixture
def model(cfg):
    return build_variant(cfg)


@pytest.fixture
def bag():
    return fixture_bag()


class TestAttentionPool:
    def test_identical_tokens(self):
        pool = AttentionPool(3, 4, np.random.default_rng(0)).astype(np.float64)
        seq = Tensor(np.tile([0.5, -1.0, 2.0], (5, 1)), dtype=np.float64)
        z, a = attention_pool(pool, seq)
        np.testing.assert_allclose(a.data, 0.2, rtol=1e-12)
        np.testing.assert_allclose(z.data, [0.5, -1.0, 2.0], rtol=1e-12)

    def test_two_token_example(self):
        pool = AttentionPool(1, 1, np.random.default_rng(0)).astype(np.float64)
        pool.V.data[...] = [[1.0]]
        pool.w.data[...] = [2 * math.log(3)]
        h0 = math.atanh(0.5)
        z, a = attention_pool(pool, Tensor([[h0], [0.0]], dtype=np.float64))
        np.testing.assert_allclose(a.data, [0.75, 0.25], rtol=1e-12)
        assert z.item() == pytest.approx(0.75 * h0, abs=1e-12)

    def test_single_token(self):
        pool = AttentionPool(3, 2, np.random.default_rng(0))
        _, a = attention_pool(pool, Tensor(np.ones((1, 3), dtype=np.float32)))
        assert a.item() == 1.0


class TestForward:
    def test_output_shapes(self, model, bag):
        out = forward(model, bag)
        assert out.logits.shape == (3,)
        assert out.probs.sum() == pytest.approx(1.0, abs=1e-5)
        assert out.attention.shape == (14,)
        assert out.attention.sum() == pytest.approx(1.0, abs=1e-5)
        assert np.all(out.attention > 0)
        assert sorted(out.per_level_attention) == [1, 2, 3]
        for values in out.per_level_attention.values():
            assert values.sum() == pytest.approx(1.0, abs=1e-9)
        assert len(out.moe_stats) == 2
        for summary in out.routing:
            assert summary.topk_idx.shape == (14, 2)
            assert summary.expert_counts.sum() == 28
        assert out.prediction in (0, 1, 2)

    def test_deterministic(self, cfg, model, bag):
        a = forward(model, bag)
        b = forward(build_variant(cfg), bag)
        np.testing.assert_array_equal(a.logits.data, b.logits.data)
        np.testing.assert_array_equal(a.attention, b.attention)

    def test_record_order_does_not_matter(self, model, bag):
        order = np.random.default_rng(5).permutation(len(bag))
        shuffled = Bag(slide_id="shuffled", label=bag.label, n_levels=bag.n_levels,
                       records=[bag.records[i] for i in order])
        a = forward(model, bag)
        b = forward(model, shuffled)
        np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=1e-6)
        np.testing.assert_allclose(a.attention[order], b.attention, rtol=1e-6)

    def test_single_token_bag(self, model):
        single = fixture_bag(fanouts=(), n_roots=1)
        out = forward(model, single)
        np.testing.assert_array_equal(out.attention, [1.0])

        # with one token the pooled vector is the token itself
        seq = model.embed(Tensor(single.features()))
        seq = static_encode(model.static_bank, seq, [1])
        for block in model.blocks:
            seq, _ = moe_mamba_block(block, seq)
        expected = model.classifier(seq).data[0]
        np.testing.assert_allclose(out.logits.data, expected, rtol=1e-5, atol=1e-6)

    def test_empty_bag(self, model):
        with pytest.raises(ContractError):
            forward(model, Bag(slide_id="empty", label=0, n_levels=3, records=[]))

    def test_width_mismatch(self, model):
        with pytest.raises(DimensionError):
            forward(model, fixture_bag(d_in=5))

    def test_resolution_ordered_scan(self, bag):
        model = build_variant(tiny_model_config(scan_scheme="resolution_ordered"))
        assert forward(model, bag).attention.sum() == pytest.approx(1.0, abs=1e-5)


class TestVariants:
    @pytest.mark.parametrize("variant", MODEL_VARIANTS)
    @pytest.mark.parametrize("overrides", [{}, {"l_static": 0}, {"n_levels": 2, "l_dyn": 1}])
    def test_parameter_counts(self, variant, overrides):
        cfg = tiny_model_config(variant=variant, **overrides)
        assert build_variant(cfg).num_parameters() == expected_parameter_count(cfg)

    def test_without_resolution_stage(self, bag):
        model = build_variant(tiny_model_config(variant="wo_r"))
        assert model.static_bank is None
        forward(model, bag)

    def test_single_expert(self, bag):
        model = build_variant(tiny_model_config(variant="wo_moe"))
        out = forward(model, bag)
        for stats in out.moe_stats:
            np.testing.assert_allclose(stats.importance.data, [1.0])
            np.testing.assert_array_equal(stats.load, [1.0])
        np.testing.assert_array_equal(out.routing[0].expert_counts, [14])

    def test_ffn_experts(self, bag):
        model = build_variant(tiny_model_config(variant="moeffn"))
        assert hasattr(model.blocks[0].experts.experts[0], "W1")
        forward(model, bag)

    def test_unknown_variant(self, cfg):
        with pytest.raises(ConfigError):
            tiny_model_config(variant="dense")
        cfg.variant = "dense"
        with pytest.raises(ContractError):
            build_variant(cfg)

    def test_block_is_residual_composition(self, cfg):
        block = MoEMambaBlock(cfg, np.random.default_rng(0)).astype(np.float64)
        seq = Tensor(np.random.default_rng(1).standard_normal((6, 4)), dtype=np.float64)
        out, stats = moe_mamba_block(block, seq)
        again, _, rd = block.forward_with_routing(seq)
        np.testing.assert_array_equal(out.data, again.data)
        assert rd.topk_idx.shape == (6, 2)
        assert stats.token_count == 6


class TestModelGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_attention_pool(self, seed):
        rng = np.random.default_rng(seed)
        pool = AttentionPool(4, 3, rng).astype(np.float64)
        seq = Tensor(rng.standard_normal((6, 4)), requires_grad=True, dtype=np.float64)
        target = Tensor(rng.standard_normal(4), dtype=np.float64)
        params = dict(pool.named_parameters())
        params["seq"] = seq

        def loss():
            z, a = attention_pool(pool, seq)
            return F.add(F.sum_all(F.mul(z, target)), F.sum_all(F.mul(a, a)))

        for name, err in check_gradients(loss, params).items():
            assert err < 1e-4, f"{name}: {err}"

    @pytest.mark.parametrize("seed", range(5))
    def test_end_to_end(self, seed):
        cfg = tiny_model_config(d_in=6, d_model=8, n_levels=2, n_experts=2, top_k=1, l_dyn=1, d_state=2,
                                lambda_balance=0.1, seed=seed)
        model = build_variant(cfg).astype(np.float64)
        bag = fixture_bag(fanouts=(2,), n_roots=2, label=seed % 3, seed=seed)
        errors = check_gradients(lambda: total_loss(forward(model, bag), bag.label, cfg.lambda_balance),
                                 dict(model.named_parameters()), max_entries=3, seed=seed)
        for name, err in errors.items():
            assert err < 1e-3, f"{name}: {err}"

    def test_training_dtype_is_float32(self, model, bag):
        out = forward(model, bag)
        assert out.logits.dtype == np.float32
        total_loss(out, 1, 0.01).backward()
        assert model.classifier.weight.grad is not None
        for name, param in model.named_parameters():
            # experts that received no token have no gradient
            if param.grad is not None:
                assert param.grad.dtype == np.float32, name
