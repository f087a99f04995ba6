"""Synthetic three-modality subjects with a controlled, known class signal.

Each subject is a smooth ellipsoidal "brain" carrying ten deep-nucleus
ellipsoids (bilateral caudate, putamen, pallidum, nigra, subthalamic).
The susceptibility map fills each nucleus with its baseline value; for the
disease class the nigra and pallidum values are elevated by a configurable
effect size with per-subject jitter.  The structural volume gets tissue
contrast and the label map assigns integer ids 1..10 (0 = background).
Random distractor blobs with nucleus-like amplitude are placed in
background tissue so that intensity alone, without the region guidance,
is a noisy predictor.

Determinism contract: (spec, label, seed) fixes every output byte, and
the random draw order is label-independent, so a disease/control pair
generated from one seed differs only inside the signal nuclei.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Nucleus:
    name: str
    center: tuple          # fractional (d, h, w)
    radii: tuple           # fractional semi-axes
    qsm_value: float       # baseline susceptibility fill
    t1_shift: float        # additive structural contrast
    disease_target: bool = False


def default_nuclei():
    """Bilateral deep gray nuclei; the nigra/pallidum pair carries the
    disease signal.  Geometry is stylized, not anatomical."""
    pairs = [
        ("caudate", (0.58, 0.38), (0.075, 0.085, 0.055), 0.06, -0.05, False),
        ("putamen", (0.52, 0.46), (0.080, 0.095, 0.060), 0.09, -0.06, False),
        ("pallidum", (0.44, 0.64), (0.070, 0.075, 0.060), 0.18, -0.12, True),
        ("nigra", (0.36, 0.70), (0.065, 0.070, 0.055), 0.16, -0.10, True),
        ("subthalamic", (0.44, 0.56), (0.040, 0.045, 0.035), 0.12, -0.08, False),
    ]
    nuclei = []
    for name, (cd, ch), radii, chi, t1, target in pairs:
        for side, cw in (("left", 0.5 - _lateral_offset(name)), ("right", 0.5 + _lateral_offset(name))):
            nuclei.append(Nucleus(f"{name}_{side}", (cd, ch, cw), radii, chi, t1, target))
    return tuple(nuclei)


def _lateral_offset(name):
    return {"caudate": 0.10, "putamen": 0.18, "pallidum": 0.14, "nigra": 0.08,
            "subthalamic": 0.06}[name]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    nuclei: tuple = field(default_factory=default_nuclei)
    brain_radii: tuple = (0.44, 0.46, 0.46)
    t1_base: float = 0.8
    t1_edge: float = 0.08            # smoothstep width of the brain boundary
    qsm_background: float = 0.02
    disease_effect: float = 0.6      # fractional susceptibility elevation of target nuclei
    disease_t1_shift: float = -0.10  # coupled structural darkening of target nuclei
    disease_jitter: float = 0.2      # relative spread of both disease effects
    value_jitter: float = 0.1        # per-nucleus fill variation, both classes
    noise_qsm: float = 0.02
    noise_t1: float = 0.02
    halo_fraction: float = 0.5   # susceptibility blooming just outside a nucleus
    halo_extent: float = 1.2     # halo outer radius as a multiple of the nucleus radius
    n_distractors: int = 4
    distractor_amp: float = 0.10
    class_balance: float = 0.5

    def __post_init__(self):
        if self.size < 4:
            raise ConfigError(f"volume size must be >= 4, got {self.size}")
        if self.disease_effect <= 0:
            raise ConfigError("disease effect size must be positive")
        self.validate_geometry()

    def validate_geometry(self):
        # sufficient containment bound in the brain-normalized metric:
        # |center offset| + worst per-axis radius ratio must stay <= 1
        for nuc in self.nuclei:
            offset = sum(
                ((nuc.center[ax] - 0.5) / self.brain_radii[ax]) ** 2 for ax in range(3)
            ) ** 0.5
            margin = max(nuc.radii[ax] / self.brain_radii[ax] for ax in range(3))
            if offset + margin > 1.0:
                raise ConfigError(
                    f"nucleus {nuc.name} leaves the brain mask "
                    f"(offset {offset:.3f} + extent {margin:.3f} > 1)"
                )

    def label_of(self, name):
        for i, nuc in enumerate(self.nuclei, start=1):
            if nuc.name == name:
                return i
        raise ConfigError(f"unknown nucleus {name!r}")

    def target_labels(self):
        return [i for i, nuc in enumerate(self.nuclei, start=1) if nuc.disease_target]

    def with_noise_scale(self, factor):
        return replace(self, noise_qsm=self.noise_qsm * factor, noise_t1=self.noise_t1 * factor)


def _fractional_grid(size):
    axes = [(np.arange(size) + 0.5) / size for _ in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_r2(grid, center, radii):
    gd, gh, gw = grid
    return (((gd - center[0]) / radii[0]) ** 2
            + ((gh - center[1]) / radii[1]) ** 2
            + ((gw - center[2]) / radii[2]) ** 2)


def synth_subject(spec: PhantomSpec, label, seed):
    """Generate one subject; returns dict with qsm, t1w (float32 volumes)
    and roi (integer label map, stored as float32 ids)."""
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 (control) or 1 (disease), got {label}")
    rng = np.random.default_rng(seed)
    size = spec.size
    grid = _fractional_grid(size)

    brain_r2 = _ellipsoid_r2(grid, (0.5, 0.5, 0.5), spec.brain_radii)
    brain = brain_r2 <= 1.0

    # label-independent draw order: nucleus jitters, disease jitter,
    # distractors, then noise fields
    fill_jitter = rng.uniform(-1.0, 1.0, size=len(spec.nuclei))
    disease_draw = rng.uniform(-1.0, 1.0)

    roi = np.zeros((size, size, size), dtype=np.int32)
    qsm = np.where(brain, np.float32(spec.qsm_background), np.float32(0.0))
    t1_edge = np.clip((1.0 - np.sqrt(brain_r2)) / spec.t1_edge, 0.0, 1.0)
    t1w = (spec.t1_base * t1_edge).astype(np.float32)

    elevation = 1.0 + spec.disease_effect * (1.0 + spec.disease_jitter * disease_draw)
    halo = np.zeros(roi.shape, dtype=bool)
    for idx, nuc in enumerate(spec.nuclei, start=1):
        r2 = _ellipsoid_r2(grid, nuc.center, nuc.radii)
        inside = r2 <= 1.0
        fresh = inside & (roi == 0)
        roi[fresh] = idx
        value = nuc.qsm_value * (1.0 + spec.value_jitter * fill_jitter[idx - 1])
        shift = nuc.t1_shift
        if label == 1 and nuc.disease_target:
            value *= elevation
            # iron accumulation darkens the structural image in step with
            # the susceptibility elevation, same subject-level jitter
            shift += spec.disease_t1_shift * (1.0 + spec.disease_jitter * disease_draw)
        qsm[fresh] = value
        t1w[fresh] += shift
        # label-independent blooming shell around the nucleus softens the
        # intensity edge; it carries the baseline (never disease) contrast
        ring = (r2 > 1.0) & (r2 <= spec.halo_extent ** 2) & brain
        base = nuc.qsm_value * (1.0 + spec.value_jitter * fill_jitter[idx - 1])
        qsm[ring & (roi == 0) & ~halo] = base * spec.halo_fraction
        halo |= ring

    for _ in range(spec.n_distractors):
        center = tuple(0.5 + rng.uniform(-0.55, 0.55) * r for r in spec.brain_radii)
        radii = tuple(rng.uniform(0.04, 0.09) for _ in range(3))
        amp = spec.distractor_amp * rng.uniform(0.5, 1.5)
        blob = _ellipsoid_r2(grid, center, radii) <= 1.0
        qsm[blob & brain & (roi == 0)] += amp

    if spec.noise_qsm > 0:
        qsm = qsm + rng.normal(0.0, spec.noise_qsm, qsm.shape).astype(np.float32)
    if spec.noise_t1 > 0:
        t1w = t1w + rng.normal(0.0, spec.noise_t1, t1w.shape).astype(np.float32)

    return {"qsm": qsm.astype(np.float32), "t1w": t1w.astype(np.float32),
            "roi": roi.astype(np.float32)}


def one_hot_roi(roi, n_labels):
    """(K, d, h, w) one-hot encoding of integer labels 1..K; background
    voxels are zero in every channel."""
    lab = np.asarray(roi)
    ids = np.rint(lab).astype(np.int32)
    if ids.min() < 0 or ids.max() > n_labels:
        raise ConfigError(f"roi labels outside 0..{n_labels}: range {ids.min()}..{ids.max()}")
    out = np.zeros((n_labels,) + lab.shape, dtype=np.float32)
    for k in range(1, n_labels + 1):
        out[k - 1][ids == k] = 1.0
    return out


def region_mask(roi, labels):
    ids = np.rint(np.asarray(roi)).astype(np.int32)
    mask = np.zeros(ids.shape, dtype=bool)
    for k in labels:
        mask |= ids == k
    return mask


def build_manifest(spec: PhantomSpec, n_subjects, seed, out_dir):
    """Generate a balanced dataset on disk and return its records.

    Writes one volume file per modality per subject under
    ``out_dir/subjects/``, a ``manifest.csv``, and a ``dataset.json``
    echoing the generation parameters.  Split tags are assigned here (a
    stratified hold-out plus cross-validation folds keyed by the same
    seed), so the on-disk dataset fully determines later training splits.
    """
    import dataclasses
    import json
    import os

    from .training import split_dataset
    from .volumeio import SubjectRecord, save_volume, write_manifest

    if n_subjects < 2:
        raise ConfigError(f"need at least 2 subjects, got {n_subjects}")
    subj_dir = os.path.join(out_dir, "subjects")
    os.makedirs(subj_dir, exist_ok=True)

    n_disease = int(round(n_subjects * spec.class_balance))
    # spread the positive class evenly through the id sequence
    labels = [
        1 if ((i + 1) * n_disease) // n_subjects > (i * n_disease) // n_subjects else 0
        for i in range(n_subjects)
    ]

    records = []
    for i in range(n_subjects):
        sid = f"s{i:04d}"
        vols = synth_subject(spec, labels[i], seed=seed * 1_000_003 + i)
        rel = {}
        for key in ("qsm", "t1w", "roi"):
            rel[key] = os.path.join("subjects", f"{sid}_{key}.gfnvol")
            save_volume(os.path.join(out_dir, rel[key]), vols[key], modality=key)
        records.append(SubjectRecord(id=sid, label=labels[i], qsm=rel["qsm"],
                                     t1w=rel["t1w"], roi=rel["roi"]))

    assignment = split_dataset(records, seed)
    tag = {}
    for sid in assignment.test_ids:
        tag[sid] = "test"
    for f, fold_ids in enumerate(assignment.folds):
        for sid in fold_ids:
            tag[sid] = f"fold{f}"
    for r in records:
        r.split = tag[r.id]

    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    echo = {"spec": dataclasses.asdict(spec), "n_subjects": n_subjects, "seed": seed}
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(echo, fh, sort_keys=True, indent=2)
    return records
