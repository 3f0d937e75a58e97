"""Dataset plumbing: manifests, standardization, and a synthetic corpus.

A manifest is the unit of all dataset I/O: a JSON file listing labeled,
source-attributed samples with train/eval/test splits and, for synthetic
fakes, the ground-truth artifact rectangle.

Two producers exist:

* `prep_dataset` standardizes raw real/fake directories the way the
  benchmark pipeline does: fixed-interval frame selection for video
  sources, center crop to 320x320, lossless PNG output, real class
  subsampled to match the fake count, per-source stratified splits.
* `synth_dataset` generates a seeded desk-scale corpus where "real"
  images are smooth random fields plus sensor noise and "fake" images
  additionally carry one small high-frequency patch at a known location,
  mostly placed away from the image center.  The known rectangle is what
  lets peak localization be scored exactly.

Everything is deterministic given the seed; per-image generators are
derived from (seed, class, index) so outputs do not depend on iteration
order or worker count.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DataError
from .residual import compute_residual

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


# ---------------------------------------------------------------- manifest ----

@dataclass
class ManifestEntry:
    path: str
    label: str   # "real" | "fake"
    source: str
    split: str   # "train" | "eval" | "test"
    artifact_box: list | None = None  # [x0, y0, x1, y1] inclusive pixels

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label,
             "source": self.source, "split": self.split}
        if self.artifact_box is not None:
            d["artifact_box"] = list(self.artifact_box)
        return d


@dataclass
class Manifest:
    seed: int
    entries: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    version: int = 1

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        c: dict[str, int] = {}
        for e in self.entries:
            c[e.label] = c.get(e.label, 0) + 1
        return c

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"version": self.version, "seed": self.seed,
               "entries": [e.to_dict() for e in self.entries],
               "metadata": self.metadata}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))

    def content_hash(self) -> str:
        doc = {"version": self.version, "seed": self.seed,
               "entries": [e.to_dict() for e in self.entries]}
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}", code="MISSING_MANIFEST")
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(path=e["path"], label=e["label"],
                                     source=e["source"], split=e["split"],
                                     artifact_box=e.get("artifact_box"))
                       for e in doc["entries"]]
            return cls(seed=doc["seed"], entries=entries,
                       metadata=doc.get("metadata", {}), version=doc["version"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}", code="BAD_MANIFEST")

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise DataError(f"duplicate path in manifest: {e.path}", code="BAD_MANIFEST")
            seen.add(e.path)
            if e.label not in ("real", "fake"):
                raise DataError(f"bad label {e.label!r} for {e.path}", code="BAD_MANIFEST")
            if e.split not in ("train", "eval", "test"):
                raise DataError(f"bad split {e.split!r} for {e.path}", code="BAD_MANIFEST")


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg_dict, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ file io ----

def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}", code="MISSING_IMAGE")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), "RGB").save(path, format="PNG")


def write_stats_csv(manifest: Manifest, path) -> None:
    """Per-source sample counts, one row per (source, label)."""
    rows: dict[tuple, int] = {}
    for e in manifest.entries:
        rows[(e.source, e.label)] = rows.get((e.source, e.label), 0) + 1
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "type", "count"])
        for (source, label), n in sorted(rows.items()):
            w.writerow([source, label, n])


# ------------------------------------------------------------ crop / frames ----

def center_crop(image: np.ndarray, size: int, path: str = "") -> np.ndarray:
    """Crop the centered size x size window; floor offsets on odd remainders."""
    img = np.asarray(image)
    squeeze = False
    if img.ndim == 3:
        img = img[None]
        squeeze = True
    h, w = img.shape[1:3]
    if h < size or w < size:
        where = f" ({path})" if path else ""
        raise DataError(f"image {w}x{h} smaller than crop {size}{where}",
                        code="TOO_SMALL")
    top = (h - size) // 2
    left = (w - size) // 2
    out = img[:, top:top + size, left:left + size, :]
    return out[0] if squeeze else out


@dataclass(frozen=True)
class SamplingPolicy:
    """Fixed-interval frame selection; some sources use a shorter interval."""
    default_interval: int = 60
    short_interval: int = 30
    short_sources: frozenset = frozenset()

    def __post_init__(self):
        if self.default_interval < 1 or self.short_interval < 1:
            raise ContractError("frame intervals must be >= 1")

    def interval_for(self, source: str) -> int:
        return self.short_interval if source in self.short_sources else self.default_interval


def sample_frames(frames: list, policy: SamplingPolicy, source: str = "") -> list:
    """Keep indices 0, k, 2k, ...; yields ceil(len/k) frames."""
    if len(frames) == 0:
        raise DataError(f"empty frame sequence ({source})", code="EMPTY_SEQUENCE")
    k = policy.interval_for(source)
    return list(frames[::k])


# ------------------------------------------------------------ manifest build ----

def _list_images(d: Path) -> list:
    return sorted(p for p in d.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def _split_boundaries(n: int, fractions) -> list:
    cum = np.floor(np.cumsum(fractions) * n).astype(int)
    cum[-1] = n
    return cum.tolist()


def build_manifest(real_dir, fake_dirs: list, fractions=(0.8, 0.1, 0.1),
                   seed: int = 0, metadata: dict | None = None) -> Manifest:
    """Balanced manifest from a real pool and named fake source directories.

    ``fake_dirs`` is a list of (source_name, directory) pairs.  The real
    class is subsampled (seeded, uniform, order-preserving) to the total
    fake count; each source, including the real pool, is then split
    train/eval/test by the given fractions.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ContractError(f"fractions must be 3 values summing to 1, got {fractions}")
    real_dir = Path(real_dir)
    real_files = _list_images(real_dir)
    if not real_files:
        raise DataError(f"no images in real dir {real_dir}", code="EMPTY_SOURCE")

    fake_by_source = []
    for name, d in fake_dirs:
        files = _list_images(Path(d))
        if not files:
            raise DataError(f"no images in fake source {name} ({d})", code="EMPTY_SOURCE")
        fake_by_source.append((name, files))
    n_fake = sum(len(f) for _, f in fake_by_source)
    if len(real_files) < n_fake:
        raise DataError(
            f"insufficient real images: {len(real_files)} < {n_fake} fakes",
            code="INSUFFICIENT_REAL")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB11D]))
    keep = np.sort(rng.choice(len(real_files), size=n_fake, replace=False))
    real_files = [real_files[i] for i in keep]

    entries: list[ManifestEntry] = []
    groups = [("real", "real", real_files)] + \
        [(name, "fake", files) for name, files in fake_by_source]
    for source, label, files in groups:
        order = rng.permutation(len(files))
        bounds = _split_boundaries(len(files), fractions)
        names = ["train"] * bounds[0] + ["eval"] * (bounds[1] - bounds[0]) \
            + ["test"] * (bounds[2] - bounds[1])
        for pos, split in zip(order, names):
            entries.append(ManifestEntry(path=str(files[pos]), label=label,
                                         source=source, split=split))
    entries.sort(key=lambda e: e.path)
    man = Manifest(seed=seed, entries=entries, metadata=metadata or {})
    man.metadata.setdefault("fractions", list(fractions))
    man.validate()
    return man


# -------------------------------------------------------------- preparation ----

def prep_dataset(real_dir, fake_dirs: list, out_dir, crop_size: int = 320,
                 policy: SamplingPolicy = SamplingPolicy(),
                 fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Manifest:
    """Standardize raw sources into a balanced, cropped PNG dataset.

    Fake directories containing subdirectories are treated as video
    sources: each subdirectory is one video's pre-extracted frames in
    lexicographic order, thinned by the sampling policy.  Images smaller
    than the crop are rejected and logged, not upscaled.
    """
    out_dir = Path(out_dir)
    rejected: list[dict] = []

    def standardize(src_path: Path, dst: Path) -> bool:
        img = load_image(src_path)
        try:
            img = center_crop(img, crop_size, path=str(src_path))
        except DataError as exc:
            rejected.append({"path": str(src_path), "reason": str(exc)})
            return False
        save_png(dst, img)
        return True

    processed_fake: list[tuple[str, Path]] = []
    for name, d in fake_dirs:
        d = Path(d)
        dst_dir = out_dir / "images" / name
        subdirs = sorted(p for p in d.iterdir() if p.is_dir())
        if subdirs:
            for video in subdirs:
                frames = _list_images(video)
                if not frames:
                    continue
                for f in sample_frames(frames, policy, source=name):
                    standardize(f, dst_dir / f"{video.name}_{f.stem}.png")
        for f in _list_images(d):
            standardize(f, dst_dir / f"{f.stem}.png")
        processed_fake.append((name, dst_dir))

    real_dst = out_dir / "images" / "real"
    for f in _list_images(Path(real_dir)):
        standardize(f, real_dst / f"{f.stem}.png")

    man = build_manifest(real_dst, processed_fake, fractions=fractions, seed=seed,
                         metadata={"crop_size": crop_size,
                                   "policy": asdict(policy) | {
                                       "short_sources": sorted(policy.short_sources)},
                                   "rejected": rejected})
    man.save(out_dir / "manifest.json")
    write_stats_csv(man, out_dir / "stats.csv")
    return man


# ---------------------------------------------------------------- synthetic ----

@dataclass(frozen=True)
class SynthConfig:
    size: int = 224
    count_per_class: int = 1250
    box_size: int = 24
    amplitude: float = 15.0          # artifact strength, 0..255 units
    pattern: str = "checkerboard"    # or "sinusoid"
    marker_strength: float = 1.0     # in-box pull toward the color lattice
    distractor_rate: float = 6e-4    # expected patches per pixel, both classes
    distractor_amplitude: tuple = (3.0, 12.0)
    distractor_burst: float = 3.0    # gamma shape for per-image load
    smoothness: int = 8              # coarse background cells per side
    field_contrast: float = 60.0
    noise_sigma: float = 2.0
    outside_center_prob: float = 0.8
    fractions: tuple = (0.8, 0.0, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.box_size > self.size:
            raise ContractError("artifact box must fit inside the image")
        if self.amplitude < 0:
            raise ContractError("amplitude must be >= 0")
        if not 0.0 <= self.marker_strength <= 1.0:
            raise ContractError("marker_strength must lie in [0, 1]")
        if self.pattern not in ("checkerboard", "sinusoid"):
            raise ContractError(f"unknown pattern {self.pattern!r}")


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """(g, g, C) -> (size, size, C), half-pixel-center sampling, edge clamp."""
    g = grid.shape[0]
    coords = (np.arange(size) + 0.5) * g / size - 0.5
    coords = np.clip(coords, 0.0, g - 1.0)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    t = coords - i0
    a = grid[np.ix_(i0, i0)]
    b = grid[np.ix_(i0, i1)]
    c = grid[np.ix_(i1, i0)]
    d = grid[np.ix_(i1, i1)]
    ty = t[:, None, None]
    tx = t[None, :, None]
    top = a * (1 - tx) + b * tx
    bot = c * (1 - tx) + d * tx
    return top * (1 - ty) + bot * ty


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    g = cfg.smoothness + 1
    coarse = rng.normal(0.0, 1.0, size=(g, g, 3))
    fld = _bilinear_upsample(coarse, cfg.size)
    fld /= max(float(np.abs(fld).max()), 1e-9)
    img = 128.0 + cfg.field_contrast * fld
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    _add_distractors(rng, img, cfg)
    return img


def _add_distractors(rng: np.random.Generator, img: np.ndarray,
                     cfg: SynthConfig) -> None:
    """Sprinkle weak texture patches over any image, real or fake.

    They give every image a high-frequency floor whose per-image load is
    bursty (gamma-mixed Poisson), so an image-wide average of texture
    responses varies more between images than the one artifact patch
    shifts it; only the strongest local response separates the classes.
    Amplitudes stay strictly below the artifact's.
    """
    ps = min(8, cfg.size)
    lam = cfg.distractor_rate * cfg.size * cfg.size
    lam *= rng.gamma(cfg.distractor_burst, 1.0 / cfg.distractor_burst)
    n = rng.poisson(lam)
    yy, xx = np.mgrid[0:ps, 0:ps]
    for _ in range(n):
        amp = rng.uniform(*cfg.distractor_amplitude)
        top, left = (int(v) for v in rng.integers(0, cfg.size - ps + 1, 2))
        phase = int(rng.integers(2))
        pat = (((yy // 2 + xx // 2 + phase) % 2) * 2.0 - 1.0) * amp
        img[top:top + ps, left:left + ps, :] += pat[:, :, None] * _ARTIFACT_MIX


# unequal per-channel weights; an equal shift of r, g, b survives the
# luma/chroma round trip unchanged, so it would never reach the residual
_ARTIFACT_MIX = np.array([1.0, -0.5, 0.25])


def _artifact_patch(cfg: SynthConfig) -> np.ndarray:
    bs = cfg.box_size
    yy, xx = np.mgrid[0:bs, 0:bs]
    if cfg.pattern == "checkerboard":
        # 2 px blocks sit above the background frequencies but low enough
        # that mild blur, rescaling and rotation leave the contrast intact
        pat = ((yy // 2 + xx // 2) % 2) * 2.0 - 1.0
    else:
        pat = np.sin(2 * np.pi * xx / 3.0) * np.sin(2 * np.pi * yy / 3.0)
    return cfg.amplitude * pat[:, :, None] * _ARTIFACT_MIX


def _valid_toplefts_outside_center(size: int, bs: int) -> np.ndarray:
    """Boolean (size-bs+1)^2 grid: True where the box avoids the center square."""
    c = size // 3
    m0 = (size - c) // 2
    m1 = m0 + c  # exclusive
    n = size - bs + 1
    t = np.arange(n)
    hits_rows = (t < m1) & (t + bs > m0)
    return ~(hits_rows[:, None] & hits_rows[None, :])


def _place_box(rng: np.random.Generator, cfg: SynthConfig) -> tuple[tuple, bool]:
    n = cfg.size - cfg.box_size + 1
    if rng.random() < cfg.outside_center_prob:
        ok = _valid_toplefts_outside_center(cfg.size, cfg.box_size)
        flat = np.flatnonzero(ok.ravel())
        if flat.size:
            idx = int(flat[rng.integers(flat.size)])
            return divmod(idx, n), False
        # box cannot avoid the center square; fall back to anywhere
        return (int(rng.integers(n)), int(rng.integers(n))), True
    return (int(rng.integers(n)), int(rng.integers(n))), False


def _quantize(img: np.ndarray) -> np.ndarray:
    from .residual import round_half_away

    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def synth_dataset(cfg: SynthConfig, out_dir) -> Manifest:
    """Write the synthetic corpus and its manifest; byte-stable under seed."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    entries: list[ManifestEntry] = []
    fallbacks = 0
    patch = _artifact_patch(cfg)

    bounds = _split_boundaries(cfg.count_per_class, cfg.fractions)
    split_names = ["train"] * bounds[0] + ["eval"] * (bounds[1] - bounds[0]) \
        + ["test"] * (bounds[2] - bounds[1])

    for cls_id, label in ((0, "real"), (1, "fake")):
        for idx in range(cfg.count_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cls_id, idx]))
            img = _background(rng, cfg)
            box = None
            if label == "fake":
                (top, left), fell_back = _place_box(rng, cfg)
                fallbacks += int(fell_back)
                win = (slice(top, top + cfg.box_size),
                       slice(left, left + cfg.box_size))
                img[win] += patch
                # the boxed region is pulled part way onto the color-space
                # integer lattice, so its stored pixels carry a quantization
                # history the rest of the image does not
                sub = np.clip(img[win], 0.0, 255.0)
                img[win] = sub - cfg.marker_strength * compute_residual(sub)
                box = [left, top, left + cfg.box_size - 1, top + cfg.box_size - 1]
            path = img_dir / f"{label}_{idx:05d}.png"
            save_png(path, _quantize(img))
            entries.append(ManifestEntry(path=str(path), label=label, source="synth",
                                         split=split_names[idx], artifact_box=box))

    entries.sort(key=lambda e: e.path)
    cfg_dict = asdict(cfg)
    man = Manifest(seed=cfg.seed, entries=entries, metadata={
        "generator": "synth",
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "placement_fallbacks": fallbacks,
    })
    man.validate()
    man.save(out_dir / "manifest.json")
    write_stats_csv(man, out_dir / "stats.csv")
    return man
