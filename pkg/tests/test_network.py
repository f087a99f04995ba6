"""Assembled network: shapes, identities, isolation, checkpoints."""

import numpy as np
import pytest

from gatefusenet.blocks import ModalityTriple, init_params
from gatefusenet.config import NetworkConfig
from gatefusenet.errors import ConfigError, FormatError
from gatefusenet.gradcheck import grad_check
from gatefusenet.losses import focal_loss
from gatefusenet.network import (
    GateFuseNet,
    build_network,
    checkpoint_bytes,
    config_mismatch,
    load_checkpoint,
    load_checkpoint_bytes,
    save_checkpoint,
)
from gatefusenet.tensor import Tensor, no_grad
from gradsuite import micro_network_case


def smoke_cfg(**kw):
    base = dict(stem_width=8, stage_widths=(16, 16, 16), roi_channels=10)
    base.update(kw)
    return NetworkConfig(**base)


def micro_cfg(**kw):
    base = dict(stem_width=4, stage_widths=(8, 8, 8), roi_channels=3, cbam_reduction=4)
    base.update(kw)
    return NetworkConfig(**base)


def raw_triple(rng, cfg, size=32, n=2, dtype=np.float32):
    return ModalityTriple(
        Tensor(rng.standard_normal((n, cfg.roi_channels, size, size, size)).astype(dtype)),
        Tensor(rng.standard_normal((n, 1, size, size, size)).astype(dtype)),
        Tensor(rng.standard_normal((n, 1, size, size, size)).astype(dtype)),
    )


class TestShapes:
    def test_feature_path_and_logit_shape(self, rng):
        net = build_network(smoke_cfg(), seed=0)
        acts = {}
        logits = net.forward(raw_triple(rng, net.cfg, size=32, n=2), collect=acts)
        assert logits.data.shape == (2, 1)
        assert acts["gf0.anchor"].data.shape == (2, 8, 16, 16, 16)
        assert acts["stage1.anchor"].data.shape == (2, 16, 8, 8, 8)
        assert acts["stage2.anchor"].data.shape == (2, 16, 4, 4, 4)
        assert acts["stage3.anchor"].data.shape == (2, 16, 2, 2, 2)

    def test_batch_of_four(self, rng):
        net = build_network(micro_cfg(), seed=1)
        logits = net.forward(raw_triple(rng, net.cfg, size=16, n=4))
        assert logits.data.shape == (4, 1)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = build_network(micro_cfg(), seed=11)
        b = build_network(micro_cfg(), seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_different_seeds_differ(self):
        a = build_network(micro_cfg(), seed=11)
        b = build_network(micro_cfg(), seed=12)
        same = all(
            np.array_equal(pa.data, pb.data)
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
        )
        assert not same

    def test_enumeration_stable(self):
        a = build_network(micro_cfg(), seed=3)
        names = [n for n, _ in a.named_parameters()]
        assert names == [n for n, _ in build_network(micro_cfg(), seed=4).named_parameters()]
        assert len(names) == len(set(names))

    def test_gate_init_default_half_blend(self, rng):
        net = build_network(micro_cfg(), seed=5)
        for p in net.gate_parameters():
            assert np.all(p.data == 0.0)


class TestGateClosedIdentity:
    def test_matches_fusion_removed_graph(self, rng):
        net = build_network(micro_cfg(), seed=7)
        for theta in net.gate_parameters():
            theta.data[:] = -40.0
        net.eval()
        vols = raw_triple(rng, net.cfg, size=16, n=2)
        with no_grad():
            full = net.forward(vols).data
            ablated = net.forward_anchor_only(vols).data
        assert np.allclose(full, ablated, atol=1e-5)

    def test_open_gates_do_differ(self, rng):
        net = build_network(micro_cfg(), seed=7)
        net.eval()
        vols = raw_triple(rng, net.cfg, size=16, n=2)
        with no_grad():
            full = net.forward(vols).data
            ablated = net.forward_anchor_only(vols).data
        assert not np.allclose(full, ablated, atol=1e-5)


class TestBranchIsolation:
    def _branch_activations(self, net, vols, modality):
        acts = []
        with no_grad():
            triple = net.stem_triple(vols)
            acts.append(triple.get(modality).data)
            triple = net.gf0.forward(triple)
            for stage in net.stages:
                triple = stage.forward(triple)
                acts.append(triple.get(modality).data)
        return acts

    def test_qsm_branch_ignores_t1_input(self, rng):
        net = build_network(micro_cfg(), seed=9)
        net.eval()
        vols_a = raw_triple(rng, net.cfg, size=16, n=1)
        vols_b = ModalityTriple(
            vols_a.roi, vols_a.qsm,
            Tensor(vols_a.t1.data + rng.standard_normal(vols_a.t1.data.shape).astype(np.float32)),
        )
        qsm_a = self._branch_activations(net, vols_a, "qsm")
        qsm_b = self._branch_activations(net, vols_b, "qsm")
        for a, b in zip(qsm_a, qsm_b):
            assert np.array_equal(a, b)

    def test_anchor_branch_does_see_t1(self, rng):
        net = build_network(micro_cfg(), seed=9)
        net.eval()
        vols_a = raw_triple(rng, net.cfg, size=16, n=1)
        vols_b = ModalityTriple(
            vols_a.roi, vols_a.qsm,
            Tensor(vols_a.t1.data + rng.standard_normal(vols_a.t1.data.shape).astype(np.float32)),
        )
        roi_a = self._branch_activations(net, vols_a, "roi")
        roi_b = self._branch_activations(net, vols_b, "roi")
        assert not np.array_equal(roi_a[-1], roi_b[-1])


class TestNoDeadParameters:
    @pytest.mark.parametrize("fusion", ["gated", "concat", "weighted_average"])
    def test_every_parameter_gets_gradient(self, rng, fusion):
        net = build_network(micro_cfg(fusion=fusion), seed=13)
        vols = raw_triple(rng, net.cfg, size=16, n=2)
        labels = np.array([[0.0], [1.0]])
        loss = focal_loss(net.forward(vols), labels)
        loss.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None, f"{name} missing gradient"
            assert np.any(p.grad != 0), f"{name} has all-zero gradient"


class TestEndToEndGradient:
    def test_micro_network_matches_finite_differences(self):
        _, inputs, f = micro_network_case(seed=21, dtype=np.float64, size=12)
        err = grad_check(f, inputs, step=3e-5, max_coords=160,
                         rng=np.random.default_rng(0))
        assert err < 1e-4


class TestCheckpoint:
    def test_roundtrip_preserves_eval_output(self, rng):
        net = build_network(micro_cfg(), seed=17)
        vols = raw_triple(rng, net.cfg, size=16, n=2)
        net.train()
        net.forward(vols)  # move the running stats off their init
        net.eval()
        with no_grad():
            before = net.forward(vols).data
        clone = load_checkpoint_bytes(checkpoint_bytes(net))
        clone.eval()
        with no_grad():
            after = clone.forward(vols).data
        assert np.array_equal(before, after)

    def test_file_roundtrip(self, rng, tmp_path):
        net = build_network(micro_cfg(), seed=18)
        path = tmp_path / "model.gfn1"
        save_checkpoint(path, net)
        clone = load_checkpoint(path)
        assert clone.cfg.to_dict() == net.cfg.to_dict()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.gfn1"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, rng, tmp_path):
        net = build_network(micro_cfg(), seed=19)
        blob = checkpoint_bytes(net)
        path = tmp_path / "cut.gfn1"
        path.write_bytes(blob[: len(blob) - 128])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_config_mismatch_reports_fields(self):
        net = build_network(micro_cfg(fusion="gated", anchor="roi"), seed=20)
        diffs = config_mismatch(net.cfg, {"fusion": "concat", "anchor": None})
        assert len(diffs) == 1
        assert "fusion" in diffs[0] and "concat" in diffs[0]
        assert config_mismatch(net.cfg, {"fusion": "gated"}) == []


class TestConfigValidation:
    def test_stage_width_reduction_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            NetworkConfig(stem_width=8, stage_widths=(12, 16, 16), cbam_reduction=8)

    def test_bad_fusion_name(self):
        with pytest.raises(ConfigError, match="fusion"):
            NetworkConfig(fusion="magic")

    def test_bad_anchor_name(self):
        with pytest.raises(ConfigError, match="anchor"):
            NetworkConfig(anchor="flair")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            NetworkConfig.from_dict({"stem_widht": 8})
