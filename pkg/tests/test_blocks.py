"""Fusion blocks: attention normalization, gating identities, CBAM, bottlenecks."""

import numpy as np
import pytest

from gatefusenet.blocks import (
    AMFBlock,
    Bottleneck,
    CBAMBlock,
    ChannelGate,
    GFBlock,
    ModalityTriple,
    StemEncoder,
    init_params,
)
from gatefusenet.config import NetworkConfig
from gatefusenet.errors import ConfigError
from gatefusenet.gradcheck import grad_check
from gatefusenet.kernels import global_avg_pool, global_max_pool
from gatefusenet.tensor import Tensor


def make_triple(rng, c=4, s=6, n=1, scale=1.0, dtype=np.float64):
    return ModalityTriple(*[
        Tensor((rng.standard_normal((n, c, s, s, s)) * scale).astype(dtype))
        for _ in range(3)
    ])


def amf_with_constant_logits(c=4, betas=(0.0, 0.0, 0.0), dtype=np.float64):
    """Zero conv weights make each head's map sigmoid(beta): a constant."""
    amf = AMFBlock(c, eps=1e-6, dtype=dtype)
    for head, norm, beta in zip(amf.heads, amf.norms, betas):
        head.weight.data[:] = 0.0
        norm.gamma.data[:] = 1.0
        norm.beta.data[:] = beta
    return amf


class TestAMF:
    def test_equal_attention_gives_mean(self, rng):
        amf = amf_with_constant_logits(betas=(0.0, 0.0, 0.0))
        tr = make_triple(rng)
        fused = amf.forward(tr).data
        mean = (tr.roi.data + tr.qsm.data + tr.t1.data) / 3.0
        # each weight is 0.5/(1.5 + eps): a third, up to eps slack
        assert np.allclose(fused, mean, atol=1e-5)

    def test_dominant_modality_wins(self, rng):
        amf = amf_with_constant_logits(betas=(-10.0, 10.0, -10.0))
        tr = make_triple(rng)
        fused = amf.forward(tr).data
        assert np.allclose(fused, tr.qsm.data, atol=1e-3)

    def test_weight_sum_with_equal_halves(self, rng):
        """Three constant 0.5 maps: the normalized sum is 1.5/(1.5 + eps)."""
        amf = amf_with_constant_logits(betas=(0.0, 0.0, 0.0))
        _, normed = amf.attention(make_triple(rng))
        total = sum(w.data for w in normed)
        expect = 1.5 / (1.5 + 1e-6)
        assert np.allclose(total, expect, atol=1e-12)
        assert expect == pytest.approx(0.99999933, abs=1e-7)

    def test_convexity_slack_on_random_blocks(self, rng):
        for trial in range(5):
            amf = AMFBlock(4, eps=1e-6, dtype=np.float64)
            init_params(amf, trial)
            _, normed = amf.attention(make_triple(rng))
            total = sum(w.data for w in normed)
            assert np.all(total <= 1.0)
            assert np.all(total >= 1.0 - 1e-5)
            for w in normed:
                assert np.all(w.data >= 0.0)

    def test_modality_dominance_by_logit_boost(self, rng):
        """Boosting one head's logits by +10 pulls the fused tensor toward
        that modality in L2."""
        for boosted in range(3):
            amf = AMFBlock(4, dtype=np.float64)
            init_params(amf, 9)
            amf.norms[boosted].beta.data[:] += 10.0
            tr = make_triple(rng)
            fused = amf.forward(tr).data
            feats = [tr.roi.data, tr.qsm.data, tr.t1.data]
            dists = [np.linalg.norm(fused - f) for f in feats]
            assert np.argmin(dists) == boosted


class TestChannelGate:
    def test_theta_zero_is_half_blend_exactly(self, rng):
        gate = ChannelGate(4, theta0=0.0, dtype=np.float64)
        init_params(gate, 0)
        fused = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
        anchor = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
        out = gate.forward(fused, anchor).data
        assert np.array_equal(out, anchor.data + 0.5 * fused.data)

    def test_theta_minus_forty_is_identity(self, rng):
        gate = ChannelGate(4, theta0=-40.0, dtype=np.float64)
        init_params(gate, 0)
        fused = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
        anchor = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
        out = gate.forward(fused, anchor).data
        assert np.allclose(out, anchor.data, atol=1e-6)

    def test_theta_gradient_matches_finite_differences(self, rng):
        gate = ChannelGate(3, theta0=0.4, dtype=np.float64)
        init_params(gate, 0)
        fused = Tensor(rng.standard_normal((1, 3, 3, 3, 3)))
        anchor = Tensor(rng.standard_normal((1, 3, 3, 3, 3)))

        def f(ts):
            return (gate.forward(ts[0], ts[1]).sigmoid()).sum()

        err = grad_check(f, [fused, anchor, gate.theta], step=1e-5)
        assert err < 1e-6

    def test_shape_checks(self, rng):
        gate = ChannelGate(4)
        a = Tensor(rng.standard_normal((1, 4, 2, 2, 2)))
        b = Tensor(rng.standard_normal((1, 4, 3, 2, 2)))
        with pytest.raises(ConfigError):
            gate.forward(a, b)


class TestGFBlock:
    def test_closed_gate_passes_triple_through(self, rng):
        cfg = NetworkConfig(stem_width=4, stage_widths=(8, 8), roi_channels=3,
                            cbam_reduction=4, gate_init=-40.0)
        gf = GFBlock(4, cfg, dtype=np.float64)
        init_params(gf, 3)
        tr = make_triple(rng)
        out = gf.forward(tr)
        for m in ("roi", "qsm", "t1"):
            assert np.allclose(out.get(m).data, tr.get(m).data, atol=1e-12)

    @pytest.mark.parametrize("anchor", ["roi", "qsm", "t1"])
    def test_only_anchor_member_changes(self, rng, anchor):
        cfg = NetworkConfig(stem_width=4, stage_widths=(8, 8), roi_channels=3,
                            cbam_reduction=4, anchor=anchor)
        gf = GFBlock(4, cfg, dtype=np.float64)
        init_params(gf, 4)
        tr = make_triple(rng)
        out = gf.forward(tr)
        for m in ("roi", "qsm", "t1"):
            unchanged = np.array_equal(out.get(m).data, tr.get(m).data)
            assert unchanged == (m != anchor)

    @pytest.mark.parametrize("strategy", ["concat", "weighted_average"])
    def test_alternative_strategies_forward_backward(self, rng, strategy):
        cfg = NetworkConfig(stem_width=4, stage_widths=(8, 8), roi_channels=3,
                            cbam_reduction=4, fusion=strategy)
        gf = GFBlock(4, cfg, dtype=np.float64)
        init_params(gf, 5)
        tr = make_triple(rng)
        out = gf.forward(tr)
        assert out.get("roi").data.shape == tr.roi.data.shape
        loss = (out.get("roi") * out.get("roi")).sum()
        loss.backward()
        for name, p in gf.named_parameters():
            assert p.grad is not None, name

    def test_weighted_average_starts_at_uniform_mix(self, rng):
        cfg = NetworkConfig(stem_width=4, stage_widths=(8, 8), roi_channels=3,
                            cbam_reduction=4, fusion="weighted_average")
        gf = GFBlock(4, cfg, dtype=np.float64)
        init_params(gf, 6)
        tr = make_triple(rng)
        fused = gf.fused_tensor(tr).data
        mean = (tr.roi.data + tr.qsm.data + tr.t1.data) / 3.0
        assert np.allclose(fused, mean, atol=1e-12)


class TestCBAM:
    def test_contraction(self, rng):
        cbam = CBAMBlock(8, reduction=4, dtype=np.float64)
        init_params(cbam, 0)
        x = Tensor(rng.standard_normal((2, 8, 4, 4, 4)))
        z = cbam.forward(x).data
        assert np.all(np.abs(z) <= np.abs(x.data) + 1e-12)

    def test_attention_maps_bounded(self, rng):
        cbam = CBAMBlock(8, reduction=4, dtype=np.float64)
        init_params(cbam, 1)
        x = Tensor(rng.standard_normal((2, 8, 4, 4, 4)))
        ca = cbam.channel_attention(x).data
        sa = cbam.spatial_attention(x).data
        assert np.all((ca > 0) & (ca < 1))
        assert np.all((sa > 0) & (sa < 1))

    def test_constant_channels_make_avg_equal_max(self, rng):
        x = Tensor(np.tile(rng.standard_normal((1, 8, 1, 1, 1)), (1, 1, 4, 4, 4)))
        assert np.allclose(global_avg_pool(x).data, global_max_pool(x).data)

    def test_channel_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="reduction"):
            CBAMBlock(6, reduction=4)


class TestBottleneck:
    def cfg(self):
        return NetworkConfig(stem_width=4, stage_widths=(8, 8), roi_channels=3,
                             cbam_reduction=4)

    def test_zero_expand_reduces_to_elu_of_input(self, rng):
        block = Bottleneck(8, 8, self.cfg(), dtype=np.float64)
        init_params(block, 0)
        block.expand.weight.data[:] = 0.0
        block.expand.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 8, 4, 4, 4)))
        out = block.forward(x).data
        assert np.allclose(out, np.where(x.data >= 0, x.data, np.expm1(x.data)), atol=1e-12)

    def test_dilated_variant_preserves_shape(self, rng):
        block = Bottleneck(8, 8, self.cfg(), dilation=2, dtype=np.float64)
        init_params(block, 1)
        x = Tensor(rng.standard_normal((1, 8, 8, 8, 8)))
        assert block.forward(x).data.shape == (1, 8, 8, 8, 8)

    def test_stride_two_halves_spatial(self, rng):
        block = Bottleneck(4, 8, self.cfg(), stride=2, dtype=np.float64)
        init_params(block, 2)
        x = Tensor(rng.standard_normal((1, 4, 16, 16, 16)))
        assert block.forward(x).data.shape == (1, 8, 8, 8, 8)


class TestStem:
    def test_shape_arithmetic(self, rng):
        stem = StemEncoder(1, 16)
        init_params(stem, 0)
        x = Tensor(rng.standard_normal((1, 1, 32, 32, 32)).astype(np.float32))
        assert stem.forward(x).data.shape == (1, 16, 16, 16, 16)

    def test_zero_input_zero_bias_gives_zero(self):
        stem = StemEncoder(2, 4, dtype=np.float64)
        init_params(stem, 1)
        x = Tensor(np.zeros((1, 2, 8, 8, 8)))
        assert np.allclose(stem.forward(x).data, 0.0)

    def test_odd_spatial_input_rejected(self, rng):
        stem = StemEncoder(1, 4)
        init_params(stem, 2)
        with pytest.raises(ConfigError, match="even"):
            stem.forward(Tensor(rng.standard_normal((1, 1, 7, 8, 8))))
