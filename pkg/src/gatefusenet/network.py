"""Full network assembly and the GFN1 checkpoint format.

The pipeline is: three modality stems -> a first fusion point -> a stack
of fusion stages (three parallel bottleneck branches, then a fusion
point) -> a decision head of dilated bottlenecks over the anchor stream,
global average pooling, and a single-logit linear layer.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .blocks import (
    Bottleneck,
    GFBlock,
    Linear,
    ModalityTriple,
    Module,
    StemEncoder,
    init_params,
)
from .config import MODALITIES, NetworkConfig
from .errors import ConfigError, FormatError
from .kernels import global_avg_pool
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GFN1"


class FusionStage(Module):
    """Three parallel stride-2 bottleneck branches followed by a fusion point."""

    def __init__(self, in_c, out_c, cfg, dtype=np.float32):
        self.branches = {
            m: Bottleneck(in_c, out_c, cfg, stride=2, dtype=dtype) for m in MODALITIES
        }
        self.gf = GFBlock(out_c, cfg, dtype=dtype)

    def forward(self, triple):
        processed = ModalityTriple(*[self.branches[m].forward(triple.get(m)) for m in MODALITIES])
        return self.gf.forward(processed)


class DecisionHead(Module):
    """Dilated bottleneck stack on the anchor stream, pooling, final logit."""

    def __init__(self, channels, cfg, dtype=np.float32):
        self.blocks = [
            Bottleneck(channels, channels, cfg, stride=1, dilation=d, dtype=dtype)
            for d in cfg.decision_dilations
        ]
        self.fc = Linear(channels, 1, dtype=dtype)

    def forward(self, x):
        for block in self.blocks:
            x = block.forward(x)
        return self.fc.forward(global_avg_pool(x))


class GateFuseNet(Module):
    """The assembled classifier; forward maps a raw triple to (n, 1) logits."""

    def __init__(self, cfg: NetworkConfig = None, dtype=np.float32):
        cfg = cfg or NetworkConfig()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.stems = {
            m: StemEncoder(cfg.in_channels(m), cfg.stem_width, dtype=dtype) for m in MODALITIES
        }
        self.gf0 = GFBlock(cfg.stem_width, cfg, dtype=dtype)
        widths = [cfg.stem_width] + list(cfg.stage_widths)
        self.stages = [
            FusionStage(widths[i], widths[i + 1], cfg, dtype=dtype)
            for i in range(len(cfg.stage_widths))
        ]
        self.head = DecisionHead(widths[-1], cfg, dtype=dtype)

    # named_parameters walks attribute order: stems, gf0, stages, head.

    def stem_triple(self, volumes):
        return ModalityTriple(*[self.stems[m].forward(volumes.get(m)) for m in MODALITIES])

    def forward(self, volumes, collect=None):
        """volumes: ModalityTriple of raw inputs (roi one-hot, qsm, t1w).

        ``collect``, if given, is a dict filled with named intermediate
        tensors ("gf0.anchor", "stage1.anchor", ...) for explanation tools.
        """
        triple = self.stem_triple(volumes)
        triple = self.gf0.forward(triple)
        if collect is not None:
            collect["gf0.anchor"] = triple.get(self.cfg.anchor)
        for i, stage in enumerate(self.stages, start=1):
            triple = stage.forward(triple)
            if collect is not None:
                collect[f"stage{i}.anchor"] = triple.get(self.cfg.anchor)
        return self.head.forward(triple.get(self.cfg.anchor))

    def forward_anchor_only(self, volumes):
        """Ablated graph: fusion points removed, anchor branch straight
        through to the decision head.  Shares all parameters with the full
        network, so closing every gate must reproduce this output."""
        m = self.cfg.anchor
        x = self.stems[m].forward(volumes.get(m))
        for stage in self.stages:
            x = stage.branches[m].forward(x)
        return self.head.forward(x)

    def gate_parameters(self):
        return [p for name, p in self.named_parameters() if name.endswith(".theta")]

    def default_cam_layer(self):
        return f"stage{len(self.stages)}.anchor"


def build_network(cfg=None, seed=0, dtype=np.float32):
    net = GateFuseNet(cfg, dtype=dtype)
    init_params(net, seed)
    return net


# -- checkpoint format --------------------------------------------------------
#
# Layout: 4-byte magic "GFN1", little-endian u64 header length, a UTF-8 JSON
# header {"config": {...}, "tensors": [{"name", "shape", "offset"}...]},
# then the concatenated float32 little-endian payload.


def _named_arrays(net):
    entries = [(name, p.data) for name, p in net.named_parameters()]
    for name, state in net.named_states():
        arr = state.running_mean if name.endswith("running_mean") else state.running_var
        entries.append((name, arr))
    return entries


def checkpoint_bytes(net):
    """Serialized checkpoint (also used for in-memory best-model tracking)."""
    tensors = []
    offset = 0
    blobs = []
    for name, arr in _named_arrays(net):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"config": net.cfg.to_dict(), "tensors": tensors}, sort_keys=True
    ).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<Q", len(header)), header] + blobs)


def save_checkpoint(path, net):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def _parse_header(raw, path):
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    return header, raw[12 + hlen:]


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    header, _ = _parse_header(raw, path)
    return header


def load_checkpoint_bytes(raw, dtype=np.float32, path="<memory>"):
    """Rebuild a network from GFN1 bytes; shapes and names must match the
    architecture implied by the embedded config."""
    header, payload = _parse_header(raw, path)
    cfg = NetworkConfig.from_dict(header["config"])
    net = GateFuseNet(cfg, dtype=dtype)
    want = dict(_named_arrays(net))
    seen = set()
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in want:
            raise FormatError(f"{path}: unknown tensor {name!r} in checkpoint")
        target = want[name]
        if tuple(target.shape) != shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {shape}, expected {tuple(target.shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            raise FormatError(
                f"{path}: payload truncated for {name!r} (need {end} bytes, have {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        target[...] = arr.astype(target.dtype)
        seen.add(name)
    missing = set(want) - seen
    if missing:
        raise FormatError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return net


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        raw = fh.read()
    return load_checkpoint_bytes(raw, dtype=dtype, path=str(path))


def config_mismatch(cfg: NetworkConfig, overrides: dict):
    """Field-level differences between a checkpoint config and requested
    overrides; empty when compatible."""
    diffs = []
    stored = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if stored.get(key) != value:
            diffs.append(f"{key}: checkpoint={stored.get(key)!r} requested={value!r}")
    return diffs
