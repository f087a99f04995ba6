"""Gradient-weighted class activation maps over the anchor stream.

For a chosen layer, channel weights are the spatial mean of the logit
gradient; the map is the rectified channel-weighted activation sum,
upsampled trilinearly to input resolution and peak-normalized.  A map
that rectifies to all zeros is returned zeroed with a flag rather than
raising, since a zeroed head is a legitimate (if useless) network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import upsample_trilinear
from .blocks import ModalityTriple
from .errors import ConfigError
from .tensor import zero_grads


@dataclass
class CamMap:
    subject_id: str
    layer_map: np.ndarray      # (d, h, w) at the chosen layer's resolution
    upsampled: np.ndarray      # (d, h, w) at input resolution
    flagged_zero: bool


def grad_cam(net, triple: ModalityTriple, target_layer=None, ids=None):
    """Compute one CamMap per sample in the batch.

    The default target layer is the deepest fusion point's anchor output,
    the last tensor with spatial extent before the decision head.
    """
    target_layer = target_layer or net.default_cam_layer()
    net.eval()
    zero_grads(net.parameters())
    acts = {}
    logits = net.forward(triple, collect=acts)
    if target_layer not in acts:
        raise ConfigError(
            f"unknown target layer {target_layer!r}; available: {sorted(acts)}"
        )
    activation = acts[target_layer]
    # eval-mode graphs have no cross-sample mixing, so one backward pass
    # from the summed logit yields every sample's own gradient
    logits.sum().backward()
    if activation.grad is None:
        grad = np.zeros_like(activation.data)
    else:
        grad = activation.grad

    n = activation.data.shape[0]
    in_shape = triple.qsm.data.shape[2:]
    ids = ids if ids is not None else [str(i) for i in range(n)]
    maps = []
    for i in range(n):
        cam, flagged = cam_from_activation(activation.data[i], grad[i])
        if flagged:
            up = np.zeros(in_shape, dtype=np.float32)
        else:
            up = upsample_trilinear(cam, in_shape).astype(np.float32)
            up_peak = up.max()
            if up_peak > 0:
                up = up / up_peak
        maps.append(CamMap(subject_id=ids[i], layer_map=cam.astype(np.float32),
                           upsampled=up, flagged_zero=flagged))
    zero_grads(net.parameters())
    return maps


def cam_from_activation(activation, grad):
    """Rectified channel-weighted activation sum, peak-normalized.

    activation, grad: (c, d, h, w) for one sample.  Returns (map, flagged)
    where flagged means the rectified map was identically zero.
    """
    weights = grad.mean(axis=(1, 2, 3))
    cam = np.maximum((weights[:, None, None, None] * activation).sum(axis=0), 0.0)
    peak = cam.max()
    if peak <= 0.0:
        return np.zeros_like(cam), True
    return cam / peak, False


def top_decile_mask(cam_volume):
    """Strictly positive voxels at or above the map's 90th percentile.

    Maps concentrate their mass on a small support; excluding the zero
    background keeps the selection meaningful when that support covers
    less than a tenth of the volume.
    """
    vol = np.asarray(cam_volume)
    if vol.max() <= 0:
        return np.zeros(vol.shape, dtype=bool)
    return (vol >= np.quantile(vol, 0.9)) & (vol > 0)


def localization_stats(cam_volume, roi, labels_by_name, target_labels):
    """Per-nucleus overlap of the top-decile CAM voxels, plus the
    enrichment of the target region relative to its volume fraction."""
    hot = top_decile_mask(cam_volume)
    ids = np.rint(np.asarray(roi)).astype(np.int32)
    n_hot = int(hot.sum())
    row = {}
    for name, lab in labels_by_name.items():
        inside = int((hot & (ids == lab)).sum())
        row[name] = inside / n_hot if n_hot else 0.0
    target = np.isin(ids, list(target_labels))
    target_frac = target.mean()
    hot_frac = float((hot & target).sum()) / n_hot if n_hot else 0.0
    row["target_fraction"] = hot_frac
    row["target_volume_fraction"] = float(target_frac)
    row["enrichment"] = hot_frac / target_frac if target_frac > 0 else 0.0
    return row
