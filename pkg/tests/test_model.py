import itertools

import numpy as np
import pytest

from cracknet.complexity import analytic_param_count
from cracknet.errors import ConfigError, DimensionError
from cracknet.model import ContextCrackNet, ModelConfig, predict_mask, probabilities
from cracknet.nn import upsample2x
from cracknet.tensor import Tensor, finite_diff_check, no_grad

FLAGS = list(itertools.product([False, True], repeat=2))


def image(seed, b=2, h=64, w=64):
    return Tensor(np.random.default_rng(seed).normal(size=(b, 3, h, w)))


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(height=40)

    def test_round_trip(self):
        cfg = ModelConfig(height=32, width=48, num_classes=3, use_cagm=False, rfem_f_int=(4, 2, 2))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"heigth": 64})

    def test_desk_widths(self):
        assert ModelConfig().widths == (8, 32, 64, 128)


class TestEncoder:
    def test_pyramid_shapes(self):
        m = ContextCrackNet(ModelConfig())
        with no_grad():
            feats = m.encode(image(0))
        shapes = [f.shape for f in feats.as_list()]
        assert shapes == [(2, 8, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]

    def test_input_mismatch(self):
        with pytest.raises(DimensionError):
            ContextCrackNet(ModelConfig())(image(0, h=32, w=32))

    def test_zeroed_block_is_identity(self):
        m = ContextCrackNet(ModelConfig(blocks_per_stage=(2, 1, 1)))
        blk = m.encoder.stages[0].items[1]
        assert blk.down is None
        blk.bn2.gamma.data[...] = 0.0
        blk.bn2.beta.data[...] = 0.0
        x = Tensor(np.abs(np.random.default_rng(1).normal(size=(2, 32, 8, 8))))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_zeroed_block_with_downsample(self):
        m = ContextCrackNet(ModelConfig())
        blk = m.encoder.stages[1].items[0]
        blk.bn2.gamma.data[...] = 0.0
        blk.bn2.beta.data[...] = 0.0
        x = Tensor(np.random.default_rng(2).normal(size=(2, 32, 8, 8)))
        ref = np.maximum(blk.down_bn(blk.down(x)).data, 0)
        np.testing.assert_array_equal(blk(x).data, ref)


class TestForward:
    @pytest.mark.parametrize("use_cagm,use_rfem", FLAGS)
    def test_shape_contract(self, use_cagm, use_rfem):
        for size in (32, 64, 128):
            for K in (1, 2, 3):
                m = ContextCrackNet(ModelConfig(height=size, width=size, num_classes=K,
                                                use_cagm=use_cagm, use_rfem=use_rfem))
                with no_grad():
                    out = m(image(K, b=1, h=size, w=size))
                assert out.shape == (1, K, size, size)

    def test_rectangular(self):
        m = ContextCrackNet(ModelConfig(height=32, width=64))
        with no_grad():
            assert m(image(0, b=1, h=32, w=64)).shape == (1, 1, 32, 64)

    def test_deterministic(self):
        a, b = ContextCrackNet(ModelConfig()), ContextCrackNet(ModelConfig())
        x = image(3)
        with no_grad():
            np.testing.assert_array_equal(a(x).data, b(x).data)
            np.testing.assert_array_equal(a(x).data, a(x).data)

    def test_open_gates_equal_baseline(self):
        cfg = ModelConfig(use_cagm=False)
        gated = ContextCrackNet(cfg)
        plain = ContextCrackNet(ModelConfig(use_cagm=False, use_rfem=False))
        plain.load_state_dict({k: v for k, v in gated.state_dict().items()
                               if k in dict(plain.state_dict())})
        for stage in gated.decoder:
            stage.psi.weight.data[...] = 0.0
            stage.psi.bias.data[...] = 1000.0
        x = image(4)
        np.testing.assert_array_equal(gated(x).data, plain(x).data)

    def test_cagm_off_bypasses_bottleneck(self):
        m = ContextCrackNet(ModelConfig(use_cagm=False))
        with no_grad():
            feats = m.encode(image(5))
            assert m.bottleneck(feats.f3) is feats.f3
            np.testing.assert_array_equal(m.decode(feats, feats.f3).data, m(image(5)).data)

    def test_decoder_schedule(self):
        m = ContextCrackNet(ModelConfig())
        x = image(6)
        with no_grad():
            feats = m.encode(x)
            d = m.bottleneck(feats.f3)
            for stage, skip in zip(m.decoder, (feats.f2, feats.f1, feats.f0)):
                d = stage(skip, upsample2x(d))
            ref = m.head(upsample2x(d))
            np.testing.assert_array_equal(ref.data, m(x).data)

    def test_gradient_spot_check_16px(self):
        m = ContextCrackNet(ModelConfig(height=16, width=16))
        x = image(7, b=2, h=16, w=16)
        w = np.random.default_rng(8).normal(size=(2, 1, 16, 16))
        assert finite_diff_check(lambda t: (m(t) * w).sum(), x, coords=5, seed=1) < 1e-3

    def test_attention_maps(self):
        m = ContextCrackNet(ModelConfig())
        with no_grad():
            m(image(9))
        maps = m.attention_maps()
        assert [a.shape for a in maps] == [(2, 1, 8, 8), (2, 1, 16, 16), (2, 1, 32, 32)]
        assert all(np.all((a > 0) & (a < 1)) for a in maps)

    def test_attention_rows_normalized(self):
        m = ContextCrackNet(ModelConfig())
        with no_grad():
            m(image(10))
        a = m.cagm.last_attention
        assert np.max(np.abs(a.sum(axis=-1) - 1)) < 1e-12


class TestParams:
    @pytest.mark.parametrize("use_cagm,use_rfem", FLAGS)
    def test_matches_analytic(self, use_cagm, use_rfem):
        cfg = ModelConfig(use_cagm=use_cagm, use_rfem=use_rfem, num_classes=2)
        assert ContextCrackNet(cfg).num_parameters() == analytic_param_count(cfg)

    def test_bottleneck_blocks_match_analytic(self):
        cfg = ModelConfig(width_mult=0.25, block="bottleneck", blocks_per_stage=(2, 1, 1))
        assert ContextCrackNet(cfg).num_parameters() == analytic_param_count(cfg)

    def test_ablation_ordering(self):
        counts = {f: ContextCrackNet(ModelConfig(use_cagm=f[0], use_rfem=f[1])).num_parameters() for f in FLAGS}
        assert counts[(True, True)] > counts[(True, False)] > counts[(False, False)]
        assert counts[(True, True)] > counts[(False, True)] > counts[(False, False)]


class TestPredict:
    def test_zero_logit_is_background(self):
        assert predict_mask(np.zeros((1, 1, 1, 1)))[0, 0, 0] == 0

    def test_argmax(self):
        logits = np.array([2.0, 5.0, 1.0]).reshape(1, 3, 1, 1)
        assert predict_mask(logits)[0, 0, 0] == 1

    def test_ties_lowest_index(self):
        assert predict_mask(np.ones((1, 3, 1, 1)))[0, 0, 0] == 0

    def test_loop_oracle(self):
        logits = np.random.default_rng(11).normal(size=(2, 3, 4, 5))
        out = predict_mask(logits)
        for b in range(2):
            for i in range(4):
                for j in range(5):
                    v = list(logits[b, :, i, j])
                    assert out[b, i, j] == v.index(max(v))
        binary = np.random.default_rng(12).normal(size=(2, 1, 4, 5))
        probs = probabilities(Tensor(binary)).data
        np.testing.assert_array_equal(predict_mask(binary), (probs[:, 0] > 0.5).astype(int))
