"""Metrics and reporting.

Accuracy uses a fixed 0.5 threshold with strict inequality (a tie counts
as real).  Average precision is the uninterpolated precision-at-positive-
ranks mean over the descending score ranking, ties kept in input order;
fake is the positive class throughout.

`evaluate` reports per-source buckets (each generator's fakes against the
shared real pool, the usual layout for multi-generator benchmarks), a
uniform mean over sources as the primary aggregate (sample-weighted mean
recorded alongside), and, when the manifest carries ground-truth artifact
rectangles, the fraction of correctly-caught fakes whose top-1 peak box
hits the rectangle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pgcm as P
from .data import Manifest, center_crop, load_image
from .errors import ContractError, DataError, InvalidInputError
from .model import ModelConfig, forward_batch
from .params import ModelParams


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    """Mean of [(p > threshold) == label]; strict, so p == threshold is 'real'."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ContractError("probs/labels must be equal-length and non-empty")
    return float(np.mean((p > threshold).astype(int) == y))


def average_precision(scores, labels) -> float:
    """AP = (1/P) * sum over positive ranks k of precision@k."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.size == 0 or s.shape != y.shape:
        raise ContractError("scores/labels must be equal-length and non-empty")
    if not np.any(y == 1):
        raise InvalidInputError("average precision undefined without positives",
                                code="UNDEFINED_METRIC")
    order = np.argsort(-s, kind="stable")
    ranked = y[order]
    cum = np.cumsum(ranked)
    pos = np.flatnonzero(ranked == 1)
    return float(np.mean(cum[pos] / (pos + 1.0)))


# -------------------------------------------------------------- inference ----

def probs_for_entries(entries, params: ModelParams, cfg: ModelConfig,
                      batch_size: int = 32, cache=None, want_peaks: bool = False):
    """Batched eval-mode probabilities in manifest order.

    With ``want_peaks`` also returns, per sample, the top-1 pixel box of
    each scoring stream as {"res": box, "rgb": box} (streams that exist).
    """
    probs = np.empty(len(entries))
    peaks = [] if want_peaks else None
    hw = (cfg.crop, cfg.crop)
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        imgs = []
        for e in chunk:
            arr = cache.get(e.path) if cache is not None else \
                center_crop(load_image(e.path), cfg.crop, path=e.path)
            imgs.append(arr)
        fwd = forward_batch(np.stack(imgs).astype(np.float64), params, cfg, mode="eval")
        probs[start:start + len(chunk)] = fwd.y_hat
        if want_peaks:
            for i in range(len(chunk)):
                d = {}
                if fwd.smap_res is not None:
                    d["res"] = P.top_k_peaks(fwd.smap_res[i], 1, "res", hw,
                                             cfg.patch_size).peaks[0].box
                if fwd.smap_rgb is not None:
                    d["rgb"] = P.top_k_peaks(fwd.smap_rgb[i], 1, "rgb", hw,
                                             cfg.patch_size).peaks[0].box
                peaks.append(d)
    return probs, peaks


# ---------------------------------------------------------------- reports ----

@dataclass
class SourceMetrics:
    source: str
    n: int
    n_real: int
    n_fake: int
    acc: float
    ap: float
    r_acc: float
    f_acc: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EvalReport:
    per_source: list = field(default_factory=list)
    mean_acc: float = float("nan")   # uniform over sources (primary)
    mean_ap: float = float("nan")
    overall: SourceMetrics | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "per_source": [s.to_dict() for s in self.per_source],
            "mean_acc": self.mean_acc, "mean_ap": self.mean_ap,
            "overall": self.overall.to_dict() if self.overall else None,
            "metadata": self.metadata,
        }, sort_keys=True, indent=1)

    def table(self) -> str:
        head = f"{'source':<14}{'n':>6}{'Acc':>8}{'AP':>8}{'R.Acc':>8}{'F.Acc':>8}"
        lines = [head, "-" * len(head)]
        for s in self.per_source:
            lines.append(f"{s.source:<14}{s.n:>6}{s.acc:>8.4f}{s.ap:>8.4f}"
                         f"{s.r_acc:>8.4f}{s.f_acc:>8.4f}")
        lines.append("-" * len(head))
        lines.append(f"{'mean':<14}{'':>6}{self.mean_acc:>8.4f}{self.mean_ap:>8.4f}")
        if self.overall:
            o = self.overall
            lines.append(f"{'overall':<14}{o.n:>6}{o.acc:>8.4f}{o.ap:>8.4f}"
                         f"{o.r_acc:>8.4f}{o.f_acc:>8.4f}")
        return "\n".join(lines)


@dataclass
class LocalizationReport:
    n_true_positive: int
    hits_res: int
    hits_rgb: int
    hits_either: int

    @property
    def frac_res(self) -> float:
        return self.hits_res / self.n_true_positive if self.n_true_positive else float("nan")

    @property
    def frac_rgb(self) -> float:
        return self.hits_rgb / self.n_true_positive if self.n_true_positive else float("nan")

    @property
    def frac_either(self) -> float:
        return self.hits_either / self.n_true_positive if self.n_true_positive else float("nan")

    def to_dict(self) -> dict:
        return {"n_true_positive": self.n_true_positive,
                "hits_res": self.hits_res, "hits_rgb": self.hits_rgb,
                "hits_either": self.hits_either,
                "frac_res": self.frac_res, "frac_rgb": self.frac_rgb,
                "frac_either": self.frac_either}


def _bucket_metrics(source: str, probs: np.ndarray, labels: np.ndarray) -> SourceMetrics:
    n_real = int(np.sum(labels == 0))
    n_fake = int(np.sum(labels == 1))
    pred = (probs > 0.5).astype(int)
    r_acc = float(np.mean(pred[labels == 0] == 0)) if n_real else float("nan")
    f_acc = float(np.mean(pred[labels == 1] == 1)) if n_fake else float("nan")
    # acc built from the class accuracies so the decomposition identity is exact
    acc = ((r_acc * n_real if n_real else 0.0) + (f_acc * n_fake if n_fake else 0.0)) \
        / (n_real + n_fake)
    ap = average_precision(probs, labels) if n_fake else float("nan")
    return SourceMetrics(source=source, n=n_real + n_fake, n_real=n_real,
                         n_fake=n_fake, acc=acc, ap=ap, r_acc=r_acc, f_acc=f_acc)


def evaluate(params: ModelParams, manifest: Manifest, cfg: ModelConfig,
             split: str = "test", batch_size: int = 32, metadata: dict | None = None,
             warn=None):
    """Returns (EvalReport, LocalizationReport or None)."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"manifest has no {split!r} split", code="EMPTY_SPLIT")
    boxes_present = any(e.artifact_box for e in entries)
    want_peaks = boxes_present and cfg.pgcm
    probs, peaks = probs_for_entries(entries, params, cfg, batch_size,
                                     want_peaks=want_peaks)
    labels = np.array([1 if e.label == "fake" else 0 for e in entries])

    real_idx = np.flatnonzero(labels == 0)
    sources = sorted({e.source for e in entries if e.label == "fake"})
    per_source = []
    for src in sources:
        fake_idx = np.array([i for i, e in enumerate(entries)
                             if e.label == "fake" and e.source == src])
        if fake_idx.size == 0:
            if warn:
                warn(f"source {src} has no samples in split {split}; omitted")
            continue
        idx = np.concatenate([real_idx, fake_idx])
        per_source.append(_bucket_metrics(src, probs[idx], labels[idx]))

    overall = _bucket_metrics("all", probs, labels)
    report = EvalReport(per_source=per_source, overall=overall)
    if per_source:
        report.mean_acc = float(np.mean([s.acc for s in per_source]))
        report.mean_ap = float(np.mean([s.ap for s in per_source]))
    report.metadata = dict(metadata or {})
    report.metadata.update({
        "split": split,
        "tau": cfg.tau,
        "manifest_hash": manifest.content_hash(),
        "weighted_mean_acc": overall.acc,
        "weighted_mean_ap": overall.ap,
    })

    loc = None
    if want_peaks:
        tp = [i for i, e in enumerate(entries)
              if e.label == "fake" and e.artifact_box and probs[i] > 0.5]
        hits_res = hits_rgb = hits_either = 0
        for i in tp:
            gt = tuple(entries[i].artifact_box)
            hit_r = "res" in peaks[i] and P.boxes_intersect(peaks[i]["res"], gt)
            hit_g = "rgb" in peaks[i] and P.boxes_intersect(peaks[i]["rgb"], gt)
            hits_res += hit_r
            hits_rgb += hit_g
            hits_either += (hit_r or hit_g)
        loc = LocalizationReport(n_true_positive=len(tp), hits_res=hits_res,
                                 hits_rgb=hits_rgb, hits_either=hits_either)
    return report, loc


# ------------------------------------------------------------- robustness ----

def robust_eval(params: ModelParams, tree_root, cfg: ModelConfig,
                batch_size: int = 32, split: str | None = None, log=None) -> list:
    """Accuracy over a perturbation tree (clean + family/level manifests).

    Returns rows (family, level, n, acc); level 0 is the clean pass.
    """
    tree_root = Path(tree_root)
    if not tree_root.is_dir():
        raise DataError(f"perturbation tree not found: {tree_root}",
                        code="MISSING_TREE")
    rows = []

    def acc_for(manifest_path, family, level):
        man = Manifest.load(manifest_path)
        entries = man.split(split) if split else man.entries
        if not entries:
            return
        probs, _ = probs_for_entries(entries, params, cfg, batch_size)
        labels = np.array([1 if e.label == "fake" else 0 for e in entries])
        rows.append((family, level, len(entries), accuracy(probs, labels)))
        if log:
            log(f"{family} level {level}: acc={rows[-1][3]:.4f} on {len(entries)}")

    clean = tree_root / "clean" / "manifest.json"
    if clean.exists():
        acc_for(clean, "clean", 0)
    for fam_dir in sorted(p for p in tree_root.iterdir() if p.is_dir() and p.name != "clean"):
        for lvl_dir in sorted(fam_dir.glob("level_*")):
            mp = lvl_dir / "manifest.json"
            if mp.exists():
                acc_for(mp, fam_dir.name, int(lvl_dir.name.split("_")[1]))
    if not rows:
        raise DataError(f"no perturbation manifests under {tree_root}", code="EMPTY_TREE")
    return rows


def write_robust_csv(rows, path) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["family", "level", "n", "acc"])
        for family, level, n, acc in rows:
            w.writerow([family, level, n, repr(acc)])
