"""Single-volume file format (GFNVOL1) and the dataset manifest.

A volume file is one JSON header line followed by the raw little-endian
float32 payload:

    {"magic": "GFNVOL1", "shape": [d, h, w], "voxel_size": [1,1,1],
     "dtype": "f32le", "modality": "qsm"}\n<payload>

Round-trips are bit-exact.  The manifest is a CSV with header
``id,label,qsm,t1w,roi,split`` where volume paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

VOLUME_MAGIC = "GFNVOL1"
MANIFEST_FIELDS = ("id", "label", "qsm", "t1w", "roi", "split")


def save_volume(path, volume, modality="", voxel_size=(1.0, 1.0, 1.0)):
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ConfigError(f"volumes are rank-3 (d, h, w), got shape {vol.shape}")
    header = {
        "magic": VOLUME_MAGIC,
        "shape": [int(s) for s in vol.shape],
        "voxel_size": [float(v) for v in voxel_size],
        "dtype": "f32le",
        "modality": modality,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def load_volume(path):
    """Returns (volume float32 (d,h,w), header dict)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable volume header ({exc})") from exc
        if header.get("magic") != VOLUME_MAGIC:
            raise FormatError(
                f"{path}: expected magic {VOLUME_MAGIC!r}, found {header.get('magic')!r}"
            )
        if header.get("dtype") != "f32le":
            raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape))
        payload = fh.read()
    if len(payload) != 4 * count:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count} for shape {shape}"
        )
    vol = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return vol, header


@dataclass
class SubjectRecord:
    """One synthetic subject: id, binary label, volume paths, split tag."""

    id: str
    label: int
    qsm: str
    t1w: str
    roi: str
    split: str = ""

    def volume_paths(self, base_dir):
        return {
            "qsm": os.path.join(base_dir, self.qsm),
            "t1w": os.path.join(base_dir, self.t1w),
            "roi": os.path.join(base_dir, self.roi),
        }


def write_manifest(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.id, r.label, r.qsm, r.t1w, r.roi, r.split])


def read_manifest(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise FormatError(
                f"{path}: manifest header {reader.fieldnames} != {list(MANIFEST_FIELDS)}"
            )
        for row in reader:
            label = int(row["label"])
            if label not in (0, 1):
                raise FormatError(f"{path}: label must be 0 or 1, got {row['label']!r}")
            records.append(SubjectRecord(
                id=row["id"], label=label, qsm=row["qsm"], t1w=row["t1w"],
                roi=row["roi"], split=row["split"],
            ))
    return records
