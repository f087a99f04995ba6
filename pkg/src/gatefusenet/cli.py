"""Command-line pipeline: synth -> train -> eval -> gradcam.

One executable drives the full study.  Exit codes are a stable scripting
contract: 0 success, 2 configuration error, 3 I/O or format error,
4 numerical failure.  Every command echoes its fully resolved settings to
``run.json`` in its output directory, and fixed seeds make reruns
byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .augment import AugmentSpec
from .config import FUSION_STRATEGIES, MODALITIES, NetworkConfig, TrainPlan
from .errors import ConfigError, DivergenceError, FormatError
from .gradcam import grad_cam, localization_stats
from .metrics import build_report
from .network import config_mismatch, load_checkpoint, save_checkpoint
from .phantoms import PhantomSpec, build_manifest
from .reporting import export_report, write_localization
from .training import (
    VolumeDataset,
    assemble_batch,
    score_subjects,
    train_fold,
)
from .volumeio import save_volume


def _write_run_echo(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(doc) - {"network", "train", "augment"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def _resolve_train_settings(args):
    doc = _load_config_file(getattr(args, "config", None))
    net_kw = dict(doc.get("network", {}))
    plan_kw = dict(doc.get("train", {}))
    aug_kw = dict(doc.get("augment", {}))
    if getattr(args, "fusion", None):
        net_kw["fusion"] = args.fusion
    if getattr(args, "anchor", None):
        net_kw["anchor"] = args.anchor
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            plan_kw[key] = value
    if getattr(args, "no_augment", False):
        plan_kw["augment"] = False
    cfg = NetworkConfig.from_dict(net_kw)
    plan = TrainPlan.from_dict(plan_kw)
    aug = AugmentSpec(**aug_kw)
    return cfg, plan, aug


def cmd_synth(args):
    spec = PhantomSpec(size=args.size).with_noise_scale(args.noise)
    records = build_manifest(spec, args.subjects, args.seed, args.out)
    n_pos = sum(r.label for r in records)
    _write_run_echo(args.out, {
        "command": "synth",
        "subjects": args.subjects,
        "size": args.size,
        "seed": args.seed,
        "noise_scale": args.noise,
        "phantom": dataclasses.asdict(spec),
    })
    print(f"manifest: {os.path.join(args.out, 'manifest.csv')}")
    print(f"subjects: {len(records)} (disease {n_pos} / control {len(records) - n_pos})")
    return 0


def _fold_tags(records):
    tags = sorted({r.split for r in records if r.split.startswith("fold")})
    if not tags:
        raise ConfigError("manifest has no fold tags; regenerate the dataset")
    return tags


def cmd_train(args):
    cfg, plan, aug = _resolve_train_settings(args)
    dataset = VolumeDataset(args.data)
    tags = _fold_tags(dataset.records)
    if args.all_folds:
        folds = list(range(len(tags)))
    else:
        if args.fold is None:
            raise ConfigError("pass --fold I or --all-folds")
        if not 0 <= args.fold < len(tags):
            raise ConfigError(f"fold {args.fold} out of range 0..{len(tags) - 1}")
        folds = [args.fold]

    echo = {
        "command": "train",
        "data": os.path.abspath(args.data),
        "network": cfg.to_dict(),
        "train": plan.to_dict(),
        "augment": dataclasses.asdict(aug),
        "folds": folds,
    }
    for fold in folds:
        fold_dir = os.path.join(args.out, f"fold{fold}")
        os.makedirs(fold_dir, exist_ok=True)
        val_ids = dataset.ids_for_split(f"fold{fold}")
        train_ids = [
            r.id for r in dataset.records
            if r.split.startswith("fold") and r.split != f"fold{fold}"
        ]
        result = train_fold(dataset, train_ids, val_ids, cfg, plan,
                            fold_seed=plan.seed * 1000 + fold, aug_spec=aug)
        suffix = ".partial" if result.diverged else ""
        ckpt_path = os.path.join(fold_dir, f"best.gfn1{suffix}")
        with open(ckpt_path, "wb") as fh:
            fh.write(result.checkpoint)
        result.write_log(os.path.join(fold_dir, f"log.csv{suffix}"))
        _write_run_echo(fold_dir, {**echo, "fold": fold})
        status = "diverged" if result.diverged else "ok"
        print(f"fold {fold}: {status}, best epoch {result.best_epoch}, "
              f"score {result.best_score:.4f} -> {ckpt_path}")
        if result.diverged:
            return 4
    return 0


def cmd_eval(args):
    dataset = VolumeDataset(args.data)
    net = load_checkpoint(args.ckpt)
    diffs = config_mismatch(net.cfg, {"fusion": args.fusion, "anchor": args.anchor})
    if diffs:
        raise ConfigError("checkpoint/flag mismatch: " + "; ".join(diffs))
    ids = dataset.ids_for_split(args.split)
    scores = score_subjects(net, dataset, ids)
    labels = dataset.labels(ids)
    report = build_report(scores, labels, threshold=args.threshold)
    export_report(report, args.out)
    _write_run_echo(args.out, {
        "command": "eval",
        "data": os.path.abspath(args.data),
        "ckpt": os.path.abspath(args.ckpt),
        "split": args.split,
        "threshold": args.threshold,
        "network": net.cfg.to_dict(),
        "n_subjects": len(ids),
    })
    print(f"split {args.split}: n={len(ids)} acc={report.accuracy:.4f} "
          f"auc={report.auc:.4f} aupr={report.aupr:.4f} -> {args.out}/metrics.json")
    return 0


def cmd_gradcam(args):
    dataset = VolumeDataset(args.data)
    net = load_checkpoint(args.ckpt)
    ids = [s for s in args.ids.split(",") if s]
    unknown = [s for s in ids if s not in dataset.by_id]
    if unknown:
        known = ", ".join(sorted(dataset.by_id))
        raise ConfigError(f"unknown ids {unknown}; valid ids: {known}")

    with open(os.path.join(args.data, "dataset.json")) as fh:
        spec_echo = json.load(fh)["spec"]
    nucleus_names = [n["name"] for n in spec_echo["nuclei"]]
    labels_by_name = {name: i + 1 for i, name in enumerate(nucleus_names)}
    target_labels = [i + 1 for i, n in enumerate(spec_echo["nuclei"]) if n["disease_target"]]

    os.makedirs(args.out, exist_ok=True)
    rows = []
    cams = []
    flagged = 0
    for sid in ids:
        triple, _ = assemble_batch(dataset, [sid], net.cfg.roi_channels)
        cam = grad_cam(net, triple, target_layer=args.layer, ids=[sid])[0]
        cams.append(cam)
        flagged += cam.flagged_zero
        roi = dataset.volumes(sid)["roi"]
        rows.append((sid, localization_stats(cam.upsampled, roi, labels_by_name, target_labels)))
    for cam in cams:
        save_volume(os.path.join(args.out, f"cam_{cam.subject_id}.gfnvol"),
                    cam.upsampled, modality="cam")
    write_localization(os.path.join(args.out, "localization.csv"), rows, nucleus_names)
    _write_run_echo(args.out, {
        "command": "gradcam",
        "data": os.path.abspath(args.data),
        "ckpt": os.path.abspath(args.ckpt),
        "ids": ids,
        "layer": args.layer or net.default_cam_layer(),
    })
    mean_enrich = float(np.mean([row["enrichment"] for _, row in rows])) if rows else 0.0
    print(f"cam maps: {len(ids)} ({flagged} flagged zero), "
          f"mean target enrichment {mean_enrich:.2f} -> {args.out}/localization.csv")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gfn",
        description="Gated multimodal 3D fusion classifier: synthesize phantom data, "
                    "train with cross-validation, evaluate, and explain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=16, help="number of subjects")
    p.add_argument("--size", type=int, default=32, help="cubic volume edge length")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--noise", type=float, default=1.0,
                   help="noise scale multiplier on both imaging modalities")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train cross-validation fold(s)",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset directory (manifest.csv)")
    p.add_argument("--out", required=True, help="output directory for fold artifacts")
    p.add_argument("--config", default=None, help="JSON config file (network/train/augment)")
    p.add_argument("--fold", type=int, default=None, help="train a single fold index")
    p.add_argument("--all-folds", action="store_true", help="train every fold")
    p.add_argument("--fusion", choices=FUSION_STRATEGIES, default=None,
                   help="override fusion strategy")
    p.add_argument("--anchor", choices=MODALITIES, default=None,
                   help="override anchor branch")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--batch-size", type=int, default=None, help="override batch size")
    p.add_argument("--seed", type=int, default=None, help="override training seed")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.gfn1)")
    p.add_argument("--out", required=True, help="output directory for report files")
    p.add_argument("--split", default="test",
                   help="record subset: test, train, all, or foldN")
    p.add_argument("--threshold", type=float, default=0.5, help="decision threshold")
    p.add_argument("--fusion", choices=FUSION_STRATEGIES, default=None,
                   help="assert the checkpoint uses this fusion strategy")
    p.add_argument("--anchor", choices=MODALITIES, default=None,
                   help="assert the checkpoint uses this anchor branch")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="write activation maps and localization stats",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.gfn1)")
    p.add_argument("--ids", required=True, help="comma-separated subject ids")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layer", default=None,
                   help="target layer (default: deepest fusion anchor output)")
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
