"""Deterministic mini-batch training.

One logical writer owns the parameters; batches are visited in a seeded
per-epoch shuffle and gradients are reduced in fixed sample order, so a
(config, seed, data) triple pins every float of the run.  The best
checkpoint is selected by eval accuracy (earlier epoch wins ties); when
the manifest has no eval split the test split stands in for selection,
which the run metadata records.

Wall-clock seconds are part of the history records for humans but are
excluded from the equality used by determinism checks.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as ME
from .data import Manifest, center_crop, load_image
from .errors import TrainingError
from .layers import bce_from_logits_mean, sigmoid
from .model import ModelConfig, backward_batch, forward_batch, init_params
from .optim import OptimState, adamw_step
from .params import ModelParams, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    batch_size: int = 32
    lr: float = 5e-5
    epochs: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    ap: float
    lam: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def records_equal(self, other: "TrainHistory") -> bool:
        """Equality over everything except wall time."""
        if len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if (a.epoch, a.loss, a.acc, a.ap, a.lam) != (b.epoch, b.loss, b.acc, b.ap, b.lam):
                return False
        return True

    def save_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "acc", "ap", "lambda", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.acc), repr(r.ap),
                            repr(r.lam), f"{r.seconds:.3f}"])

    @classmethod
    def load_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                h.records.append(EpochRecord(
                    epoch=int(row["epoch"]), loss=float(row["loss"]),
                    acc=float(row["acc"]), ap=float(row["ap"]),
                    lam=float(row["lambda"]), seconds=float(row["seconds"])))
        return h


class _CropCache:
    """Decoded, center-cropped uint8 images keyed by path."""

    def __init__(self, crop: int):
        self.crop = crop
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._store.get(path)
        if arr is None:
            arr = center_crop(load_image(path), self.crop, path=path)
            self._store[path] = arr
        return arr


def train(manifest: Manifest, cfg: TrainConfig, out_dir=None,
          log=None) -> tuple[ModelParams, TrainHistory]:
    """Returns (best-eval params, per-epoch history)."""
    train_entries = manifest.split("train")
    if not train_entries:
        raise TrainingError("manifest has no train split")
    labels_present = {e.label for e in train_entries}
    if labels_present != {"real", "fake"}:
        raise TrainingError(f"train split needs both classes, has {sorted(labels_present)}")

    eval_entries = manifest.split("eval")
    eval_split_used = "eval"
    if not eval_entries:
        eval_entries = manifest.split("test")
        eval_split_used = "test"

    mc = cfg.model
    params = init_params(mc, cfg.seed)
    state = OptimState.init(params.trainable_arrays())
    cache = _CropCache(mc.crop)
    labels = np.array([1.0 if e.label == "fake" else 0.0 for e in train_entries])
    paths = [e.path for e in train_entries]
    n = len(paths)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))

    history = TrainHistory()
    best_params = params.copy()
    best_acc = -1.0
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = np.stack([cache.get(paths[i]) for i in idx]).astype(np.float64)
            y = labels[idx]
            fwd = forward_batch(x, params, mc, mode="train", want_caches=True)
            loss_sum += bce_from_logits_mean(fwd.y_pred, y) * len(idx)
            dy = (sigmoid(fwd.y_pred) - y) / len(idx)
            grads = backward_batch(dy, fwd, params, mc)
            adamw_step(params.trainable_arrays(), grads, state,
                       lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                       eps=cfg.eps, weight_decay=cfg.weight_decay)
            for name, val in fwd.bn_updates.items():
                params[name][...] = val

        acc = ap = float("nan")
        if eval_entries:
            probs, _ = ME.probs_for_entries(eval_entries, params, mc,
                                            batch_size=cfg.batch_size, cache=cache)
            ey = np.array([1 if e.label == "fake" else 0 for e in eval_entries])
            acc = ME.accuracy(probs, ey)
            ap = ME.average_precision(probs, ey)
            if acc > best_acc:
                best_acc = acc
                best_epoch = epoch
                best_params = params.copy()
        lam = float(params["pgcm.lam"][0]) if "pgcm.lam" in params else float("nan")
        rec = EpochRecord(epoch=epoch, loss=loss_sum / n, acc=acc, ap=ap,
                          lam=lam, seconds=time.perf_counter() - t0)
        history.records.append(rec)
        if log:
            log(f"epoch {rec.epoch}: loss={rec.loss:.4f} acc={rec.acc:.4f} "
                f"ap={rec.ap:.4f} lambda={rec.lam:.4f} ({rec.seconds:.1f}s)")

    if not eval_entries:
        best_params = params
        best_epoch = cfg.epochs

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tc = asdict(cfg)
        tc.pop("model")
        save_checkpoint(out_dir / "best.pgck", best_params, meta={
            "best_epoch": best_epoch, "best_acc": best_acc,
            "eval_split_used": eval_split_used, "model": asdict(mc), "train": tc,
            "manifest_hash": manifest.content_hash()})
        history.save_csv(out_dir / "history.csv")
    return best_params, history
