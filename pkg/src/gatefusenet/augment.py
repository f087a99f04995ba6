"""Train-time augmentation and shape standardization.

One random affine (small rotation, translation, isotropic scale) is
applied jointly to all three volumes of a subject: trilinear resampling
for the two image modalities, nearest-neighbor for the label map so the
ids stay in {0..K}.  A multiplicative bias field perturbs the structural
volume only, and additive Gaussian noise goes on the two image volumes.
Each of the three augmentations fires independently with its own
probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AugmentSpec:
    rotate_deg: float = 5.0
    translate_vox: float = 2.0
    scale_low: float = 0.9
    scale_high: float = 1.1
    p_affine: float = 0.2
    bias_coef: float = 0.3
    bias_order: int = 2
    p_bias: float = 0.1
    noise_sigma: float = 0.02
    p_noise: float = 0.1

    def __post_init__(self):
        for name in ("p_affine", "p_bias", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


def _rotation_matrix(angles):
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def trilinear_sample(vol, coords, mode="zero"):
    """Sample ``vol`` at fractional voxel coordinates (3, N).

    mode "zero": out-of-bounds reads contribute zero (used by the affine);
    mode "clamp": coordinates are clamped to the edge (used by upsampling).
    """
    vol = np.asarray(vol)
    d, h, w = vol.shape
    c = coords
    if mode == "clamp":
        c = np.stack([
            np.clip(c[0], 0, d - 1), np.clip(c[1], 0, h - 1), np.clip(c[2], 0, w - 1)
        ])
    f = np.floor(c).astype(np.int64)
    t = (c - f).astype(vol.dtype)
    out = np.zeros(c.shape[1], dtype=vol.dtype)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                iz, iy, ix = f[0] + dz, f[1] + dy, f[2] + dx
                weight = (
                    (t[0] if dz else 1 - t[0])
                    * (t[1] if dy else 1 - t[1])
                    * (t[2] if dx else 1 - t[2])
                )
                inside = (iz >= 0) & (iz < d) & (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
                vals = vol[np.clip(iz, 0, d - 1), np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
                out += weight * np.where(inside, vals, 0)
    return out


def nearest_sample(vol, coords):
    vol = np.asarray(vol)
    d, h, w = vol.shape
    idx = np.rint(coords).astype(np.int64)
    inside = ((idx[0] >= 0) & (idx[0] < d) & (idx[1] >= 0) & (idx[1] < h)
              & (idx[2] >= 0) & (idx[2] < w))
    vals = vol[np.clip(idx[0], 0, d - 1), np.clip(idx[1], 0, h - 1), np.clip(idx[2], 0, w - 1)]
    return np.where(inside, vals, 0).astype(vol.dtype)


def _output_grid(shape):
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid])


def affine_coords(shape, matrix, translation):
    """Source coordinates for each output voxel of the given transform."""
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    out = _output_grid(shape)
    rel = out - center[:, None]
    src = matrix @ rel + center[:, None] - np.asarray(translation, dtype=np.float64)[:, None]
    return src


def apply_affine(volumes, matrix, translation):
    """Resample a {qsm, t1w, roi} dict through one shared affine."""
    shape = volumes["qsm"].shape
    src = affine_coords(shape, matrix, translation)
    out = {}
    for key in ("qsm", "t1w"):
        out[key] = trilinear_sample(volumes[key], src, mode="zero").reshape(shape).astype(np.float32)
    out["roi"] = nearest_sample(volumes["roi"], src).reshape(shape).astype(np.float32)
    return out


def sample_affine(spec: AugmentSpec, rng):
    angles = np.deg2rad(rng.uniform(-spec.rotate_deg, spec.rotate_deg, size=3))
    translation = rng.uniform(-spec.translate_vox, spec.translate_vox, size=3)
    scale = rng.uniform(spec.scale_low, spec.scale_high)
    return _rotation_matrix(angles) / scale, translation


def bias_field(shape, coef, order, rng):
    """exp of a random low-order polynomial over [-1, 1]^3 grids."""
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    gd, gh, gw = np.meshgrid(*axes, indexing="ij")
    log_field = np.zeros(shape, dtype=np.float64)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                c = rng.uniform(-coef, coef)
                log_field += c * (gd ** i) * (gh ** j) * (gw ** k)
    return np.exp(log_field).astype(np.float32)


def augment(volumes, spec: AugmentSpec, rng):
    """Apply the augmentation pipeline to one subject's volume dict."""
    shapes = {volumes[k].shape for k in ("qsm", "t1w", "roi")}
    if len(shapes) != 1:
        raise ConfigError(f"augment requires aligned volumes, got shapes {shapes}")
    out = dict(volumes)
    if rng.uniform() < spec.p_affine:
        matrix, translation = sample_affine(spec, rng)
        out = apply_affine(out, matrix, translation)
    if rng.uniform() < spec.p_bias:
        field = bias_field(out["t1w"].shape, spec.bias_coef, spec.bias_order, rng)
        out["t1w"] = (out["t1w"] * field).astype(np.float32)
    if rng.uniform() < spec.p_noise:
        out["qsm"] = (out["qsm"] + rng.normal(0.0, spec.noise_sigma, out["qsm"].shape)).astype(np.float32)
        out["t1w"] = (out["t1w"] + rng.normal(0.0, spec.noise_sigma, out["t1w"].shape)).astype(np.float32)
    return out


def upsample_trilinear(vol, out_shape):
    """Resample a (d, h, w) map to ``out_shape`` with edge-clamped trilinear
    interpolation (voxel centers aligned, the align_corners=False convention)."""
    vol = np.asarray(vol)
    axes = [
        (np.arange(o, dtype=np.float64) + 0.5) * (i / o) - 0.5
        for o, i in zip(out_shape, vol.shape)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    return trilinear_sample(vol, coords, mode="clamp").reshape(out_shape)


def crop_or_pad(volume, target):
    """Center crop or zero-pad each axis independently to ``target``.

    Odd differences put the extra voxel on the high side, for both crop
    and pad.  Label maps pad with 0, which is the background id.
    """
    vol = np.asarray(volume)
    if isinstance(target, int):
        target = (target,) * vol.ndim
    if len(target) != vol.ndim:
        raise ConfigError(f"target rank {len(target)} != volume rank {vol.ndim}")
    out = vol
    for ax, goal in enumerate(target):
        size = out.shape[ax]
        if goal < 1:
            raise ConfigError(f"target size must be >= 1, got {goal}")
        if size > goal:
            start = (size - goal) // 2
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(start, start + goal)
            out = out[tuple(sl)]
        elif size < goal:
            low = (goal - size) // 2
            high = goal - size - low
            pads = [(0, 0)] * out.ndim
            pads[ax] = (low, high)
            out = np.pad(out, pads)
    return np.ascontiguousarray(out)
