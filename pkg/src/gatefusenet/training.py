"""Cross-validation protocol and the per-fold training loop.

Splitting is stratified twice: an 80/20 hold-out first, then the training
portion into folds, all keyed by one seed.  Each fold trains with
augmentation on its training records only, evaluates the validation fold
after every epoch, and retains the checkpoint maximizing the mean of
validation AUC and F1 at threshold 0.5 (ties going to the earlier epoch).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentSpec, augment, crop_or_pad
from .blocks import ModalityTriple
from .config import NetworkConfig, TrainPlan
from .errors import ConfigError, DivergenceError
from .losses import FocalParams, focal_loss
from .metrics import confusion_metrics, roc_auc
from .network import GateFuseNet, build_network, checkpoint_bytes
from .optim import OptimState, adamw_step, cosine_lr
from .phantoms import one_hot_roi
from .tensor import Tensor, no_grad, zero_grads
from .volumeio import load_volume, read_manifest


@dataclass
class SplitAssignment:
    test_ids: list
    folds: list  # list of id lists, length = fold count

    def fold_split(self, fold):
        if not 0 <= fold < len(self.folds):
            raise ConfigError(f"fold {fold} out of range 0..{len(self.folds) - 1}")
        val = list(self.folds[fold])
        train = [i for f, ids in enumerate(self.folds) if f != fold for i in ids]
        return train, val


def split_dataset(records, seed, folds=5, test_fraction=0.2):
    """Stratified hold-out plus stratified fold partition, seed-keyed.

    Every record lands in exactly one of: the test set or one fold.
    """
    by_class = {0: [], 1: []}
    for r in records:
        if r.label not in by_class:
            raise ConfigError(f"label must be 0 or 1, got {r.label!r}")
        by_class[r.label].append(r.id)
    if not by_class[0] or not by_class[1]:
        raise ConfigError("both classes must be present to split")
    if len(records) < 10:
        raise ConfigError(f"need at least 10 records to split, got {len(records)}")

    rng = np.random.default_rng(seed)
    test_ids = []
    fold_ids = [[] for _ in range(folds)]
    cursor = 0  # rotates across classes so small datasets still fill every fold
    for label in (0, 1):
        ids = sorted(by_class[label])
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n_test = int(round(test_fraction * len(ids)))
        test_ids.extend(shuffled[:n_test])
        for j, sid in enumerate(shuffled[n_test:]):
            fold_ids[(cursor + j) % folds].append(sid)
        cursor = (cursor + len(shuffled) - n_test) % folds
    for f, ids in enumerate(fold_ids):
        if not ids:
            raise ConfigError(f"fold {f} is empty; too few records for {folds} folds")
    return SplitAssignment(test_ids=sorted(test_ids), folds=[sorted(ids) for ids in fold_ids])


class VolumeDataset:
    """All volumes of a manifest held in memory (desk-scale datasets)."""

    def __init__(self, data_dir, target_size=None):
        self.data_dir = data_dir
        manifest = os.path.join(data_dir, "manifest.csv")
        self.records = read_manifest(manifest)
        self.by_id = {r.id: r for r in self.records}
        self.target_size = target_size
        self._cache = {}

    def labels(self, ids):
        return np.array([self.by_id[i].label for i in ids], dtype=np.float32)

    def ids_for_split(self, split):
        if split == "all":
            return [r.id for r in self.records]
        if split == "train":
            return [r.id for r in self.records if r.split != "test"]
        if split == "test":
            ids = [r.id for r in self.records if r.split == "test"]
        else:
            ids = [r.id for r in self.records if r.split == split]
        if not ids:
            raise ConfigError(f"no records tagged {split!r} in manifest")
        return ids

    def volumes(self, sid):
        if sid not in self._cache:
            rec = self.by_id[sid]
            paths = rec.volume_paths(self.data_dir)
            vols = {key: load_volume(path)[0] for key, path in paths.items()}
            if self.target_size:
                vols = {k: crop_or_pad(v, self.target_size) for k, v in vols.items()}
            self._cache[sid] = vols
        return self._cache[sid]


def assemble_batch(dataset, ids, roi_channels, aug=None, rng=None):
    """Stack subject volumes into a raw input triple plus label vector."""
    rois, qsms, t1s = [], [], []
    for sid in ids:
        vols = dataset.volumes(sid)
        if aug is not None:
            vols = augment(vols, aug, rng)
        rois.append(one_hot_roi(vols["roi"], roi_channels))
        qsms.append(vols["qsm"][None])
        t1s.append(vols["t1w"][None])
    triple = ModalityTriple(
        Tensor(np.stack(rois)), Tensor(np.stack(qsms)), Tensor(np.stack(t1s))
    )
    return triple, dataset.labels(ids).reshape(-1, 1)


def score_subjects(net, dataset, ids, batch_size=4):
    """Eval-mode probability scores, deterministic batching."""
    net.eval()
    scores = []
    with no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            triple, _ = assemble_batch(dataset, chunk, net.cfg.roi_channels)
            logits = net.forward(triple)
            scores.extend(1.0 / (1.0 + np.exp(-logits.data[:, 0])))
    return np.asarray(scores, dtype=np.float64)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_auc: float
    val_f1: float
    val_acc: float


@dataclass
class TrainResult:
    best_epoch: int
    best_score: float
    log: list
    checkpoint: bytes
    diverged: bool = False

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_auc", "val_f1", "val_acc"])
            for row in self.log:
                writer.writerow([
                    row.epoch, f"{row.lr:.10g}", f"{row.train_loss:.6f}",
                    f"{row.val_auc:.6f}", f"{row.val_f1:.6f}", f"{row.val_acc:.6f}",
                ])


def train_fold(dataset, train_ids, val_ids, cfg: NetworkConfig, plan: TrainPlan,
               fold_seed, aug_spec=None, stop_when=None):
    """Train one model on ``train_ids``; validate on ``val_ids`` per epoch.

    Returns the best checkpoint by mean(val AUC, val F1@0.5), earlier epoch
    winning ties.  A non-finite loss aborts the fold, keeping the last good
    checkpoint and flagging divergence.  ``stop_when`` (row -> bool) allows
    budgeted experiments to stop once a target is reached.
    """
    if not train_ids or not val_ids:
        raise ConfigError("train and validation id lists must be non-empty")
    net = build_network(cfg, seed=fold_seed)
    params = net.parameters()
    opt = OptimState(params, weight_decay=plan.weight_decay)
    focal = FocalParams(gamma=plan.focal_gamma, alpha=plan.focal_alpha)
    aug_spec = aug_spec if aug_spec is not None else AugmentSpec()
    rng = np.random.default_rng(fold_seed + 1)

    best = None  # (neg score, epoch, checkpoint bytes)
    log = []
    diverged = False
    for epoch in range(plan.epochs):
        lr = cosine_lr(epoch, plan.epochs, plan.base_lr, plan.lr_floor)
        order = rng.permutation(len(train_ids))
        losses = []
        net.train()
        try:
            for start in range(0, len(order), plan.batch_size):
                batch_ids = [train_ids[i] for i in order[start:start + plan.batch_size]]
                triple, labels = assemble_batch(
                    dataset, batch_ids, cfg.roi_channels,
                    aug=aug_spec if plan.augment else None, rng=rng,
                )
                zero_grads(params)
                loss = focal_loss(net.forward(triple), labels, focal)
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                         for p in params]
                adamw_step(opt, grads, lr)
                losses.append(float(loss.data))
        except DivergenceError:
            diverged = True

        if diverged:
            break

        val_scores = score_subjects(net, dataset, val_ids)
        val_labels = dataset.labels(val_ids)
        auc = roc_auc(val_scores, val_labels).auc
        rep = confusion_metrics(val_scores, val_labels, threshold=0.5)
        row = EpochRow(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                       val_auc=auc, val_f1=rep.f1, val_acc=rep.accuracy)
        log.append(row)
        combined = 0.5 * (row.val_auc + row.val_f1)
        if best is None or combined > best[0]:
            best = (combined, epoch, checkpoint_bytes(net))
        if stop_when is not None and stop_when(row):
            break

    if best is None:
        raise DivergenceError("training diverged before completing the first epoch")
    return TrainResult(best_epoch=best[1], best_score=best[0], log=log,
                       checkpoint=best[2], diverged=diverged)
