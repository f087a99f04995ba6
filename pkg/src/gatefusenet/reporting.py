"""Evaluation artifacts on disk: metrics.json, roc.csv, pr.csv, CAM volumes.

Exports are deterministic byte-for-byte: JSON keys are sorted, floats use
repr, and CSV rows are written in sweep order, so re-running an export
over the same report is idempotent.
"""

from __future__ import annotations

import csv
import json
import os

from .volumeio import save_volume


def export_report(report, out_dir, cams=None):
    """Write metrics.json, roc.csv, pr.csv, and optional cam_<id>.gfnvol
    files; returns the list of paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(report.scalars(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(metrics_path)

    roc_path = os.path.join(out_dir, "roc.csv")
    with open(roc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in report.roc_points:
            writer.writerow([f"{fpr:.10g}", f"{tpr:.10g}", f"{thr:.10g}"])
    written.append(roc_path)

    pr_path = os.path.join(out_dir, "pr.csv")
    with open(pr_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision", "threshold"])
        for recall, precision, thr in report.pr_points:
            writer.writerow([f"{recall:.10g}", f"{precision:.10g}", f"{thr:.10g}"])
    written.append(pr_path)

    for cam in cams or []:
        cam_path = os.path.join(out_dir, f"cam_{cam.subject_id}.gfnvol")
        save_volume(cam_path, cam.upsampled, modality="cam")
        written.append(cam_path)
    return written


def write_localization(path, rows, nucleus_names):
    """localization.csv: one row per subject with per-nucleus top-decile
    overlap and the target-region enrichment."""
    header = (["id"] + list(nucleus_names)
              + ["target_fraction", "target_volume_fraction", "enrichment"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sid, row in rows:
            writer.writerow([sid] + [f"{row[k]:.6f}" for k in header[1:]])
