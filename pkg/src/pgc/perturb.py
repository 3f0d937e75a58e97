"""Test-time degradation suite.

Twelve swept families, each with a five-entry parameter grid (levels are
1-based positions in the grid, in the grid's printed order), plus shot
noise driven by an explicit photon-count parameter (operating point
p=15).  Exact definitions, frozen for regression testing:

    brightness   x * f
    contrast     (x - 128) * f + 128
    gamma        255 * (x/255)^(1/f)
    defocus_blur disk-kernel convolution, radius r (supersampled coverage)
    gaussian_blur  gaussian kernel truncated at 3 sigma, reflect padding
    motion_blur  normalized line kernel, given length, seeded angle
    hue          H += offset degrees in HSV
    saturation   S *= f in HSV (clamped)
    impulse_noise  exactly ceil(ratio*H*W) distinct pixels -> uniform RGB
    pixelate     box-average downsample by ratio, nearest upsample back
    rescale      bilinear down by ratio, bilinear up
    rotation     bilinear rotate about center, crop largest inscribed
                 axis-aligned rectangle, resize back
    shot_noise   clamp(Poisson(x01 * p) / p) per channel

Outputs are clamped to [0,255] and re-quantized to 8 bits.  Identity
parameters (factor 1.0, offset 0, ratio 1.0, angle 0) return the input
bytes unchanged.  Stochastic families are pure functions of (image,
spec, seed); sweep seeds are derived per (global seed, file, family,
level) so results never depend on traversal or worker order.
"""
from __future__ import annotations

import csv
import hashlib
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Manifest, ManifestEntry, load_image, save_png
from .errors import ContractError, DataError
from .residual import round_half_away

PARAM_GRIDS = {
    "brightness": [0.95, 0.90, 1.05, 1.10, 1.15],
    "contrast": [0.95, 0.90, 1.05, 1.10, 1.15],
    "gamma": [0.95, 0.90, 1.05, 1.10, 1.15],
    "defocus_blur": [0.6, 1.0, 1.4, 1.8, 2.2],
    "gaussian_blur": [0.4, 0.8, 1.2, 1.6, 2.0],
    "motion_blur": [3, 5, 7, 9, 11],
    "hue": [1, 2, 3, 4, 5],
    "saturation": [0.9, 1.0, 1.1, 1.2, 1.3],
    "impulse_noise": [0.002, 0.004, 0.006, 0.008, 0.010],
    "pixelate": [0.98, 0.96, 0.94, 0.92, 0.90],
    "rescale": [0.90, 0.84, 0.77, 0.71, 0.65],
    "rotation": [2, 4, 6, 8, 10],
}

SWEEP_FAMILIES = tuple(PARAM_GRIDS)          # the 12 swept families
FAMILIES = SWEEP_FAMILIES + ("shot_noise",)  # plus the explicit-parameter one
SHOT_NOISE_P = 15.0                          # standard operating point


@dataclass(frozen=True)
class PerturbationSpec:
    family: str
    level: int | None = None    # 1..5 position in the family grid
    param: float | None = None  # explicit parameter, overrides the grid
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown perturbation family {self.family!r}")
        if (self.level is None) == (self.param is None):
            raise ContractError("give exactly one of level or param")
        if self.level is not None:
            if self.family == "shot_noise":
                raise ContractError("shot_noise takes an explicit param, not a level")
            if not 1 <= self.level <= 5:
                raise ContractError(f"level must be 1..5, got {self.level}")

    def resolved_param(self) -> float:
        if self.param is not None:
            return float(self.param)
        return float(PARAM_GRIDS[self.family][self.level - 1])


def _quant(img: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def _disk_kernel(radius: float) -> np.ndarray:
    k = 2 * int(np.ceil(radius)) + 1
    c = k // 2
    sub = (np.arange(16) + 0.5) / 16.0 - 0.5
    yy, xx = np.mgrid[0:k, 0:k]
    dy = (yy - c)[:, :, None, None] + sub[None, None, :, None]
    dx = (xx - c)[:, :, None, None] + sub[None, None, None, :]
    cover = (dy * dy + dx * dx <= radius * radius).mean(axis=(2, 3))
    s = cover.sum()
    if s == 0.0:
        cover[c, c] = 1.0
        s = 1.0
    return cover / s


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    a = np.deg2rad(angle_deg)
    for t in np.arange(length) - c:
        y = c + t * np.sin(a)
        x = c + t * np.cos(a)
        i0, j0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - i0, x - j0
        for di, wy in ((0, 1 - fy), (1, fy)):
            for dj, wx in ((0, 1 - fx), (1, fx)):
                i, j = i0 + di, j0 + dj
                if 0 <= i < length and 0 <= j < length:
                    k[i, j] += wy * wx
    return k / k.sum()


def _hsv_shift(img: np.ndarray, hue_offset: float = 0.0,
               sat_factor: float = 1.0) -> np.ndarray:
    import cv2

    x = (img / 255.0).astype(np.float32)
    hsv = cv2.cvtColor(x, cv2.COLOR_RGB2HSV)  # H in [0,360), S/V in [0,1]
    hsv[:, :, 0] = np.mod(hsv[:, :, 0] + hue_offset, 360.0)
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] * sat_factor, 0.0, 1.0)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float64) * 255.0


def _resize(img: np.ndarray, wh: tuple, interp) -> np.ndarray:
    import cv2

    return cv2.resize(img.astype(np.float32), wh, interpolation=interp)


def _inscribed_rect(w: int, h: int, angle_deg: float) -> tuple[int, int]:
    """Largest axis-aligned rectangle inside a w x h rectangle rotated by angle."""
    a = np.deg2rad(angle_deg % 180.0)
    sin_a, cos_a = abs(np.sin(a)), abs(np.cos(a))
    if w <= 0 or h <= 0:
        return 0, 0
    long_side, short_side = max(w, h), min(w, h)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-12:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return max(int(wr), 1), max(int(hr), 1)


def apply(image: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Apply one perturbation to an 8-bit RGB image; returns 8-bit RGB."""
    import cv2

    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected uint8 HxWx3 image, got {img.dtype} {img.shape}")
    fam = spec.family
    p = spec.resolved_param()
    h, w = img.shape[:2]
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    x = img.astype(np.float64)

    if fam == "brightness":
        if p == 1.0:
            return img.copy()
        return _quant(x * p)
    if fam == "contrast":
        if p == 1.0:
            return img.copy()
        return _quant((x - 128.0) * p + 128.0)
    if fam == "gamma":
        if p == 1.0:
            return img.copy()
        return _quant(255.0 * (x / 255.0) ** (1.0 / p))
    if fam == "defocus_blur":
        if p == 0.0:
            return img.copy()
        k = _disk_kernel(p)[:, :, None]
        return _quant(ndimage.convolve(x, k, mode="reflect"))
    if fam == "gaussian_blur":
        if p == 0.0:
            return img.copy()
        return _quant(ndimage.gaussian_filter(x, sigma=(p, p, 0), truncate=3.0,
                                              mode="reflect"))
    if fam == "motion_blur":
        length = int(p)
        if length <= 1:
            return img.copy()
        angle = rng.uniform(0.0, 180.0)
        k = _line_kernel(length, angle)[:, :, None]
        return _quant(ndimage.convolve(x, k, mode="reflect"))
    if fam == "hue":
        if p == 0.0:
            return img.copy()
        return _quant(_hsv_shift(x, hue_offset=p))
    if fam == "saturation":
        if p == 1.0:
            return img.copy()
        return _quant(_hsv_shift(x, sat_factor=p))
    if fam == "impulse_noise":
        if p == 0.0:
            return img.copy()
        n = int(np.ceil(p * h * w))
        flat_idx = rng.choice(h * w, size=n, replace=False)
        vals = rng.integers(0, 256, size=(n, 3), dtype=np.int64)
        out = img.copy()
        out.reshape(-1, 3)[flat_idx] = vals.astype(np.uint8)
        return out
    if fam == "pixelate":
        if p == 1.0:
            return img.copy()
        w2 = max(1, int(round(w * p)))
        h2 = max(1, int(round(h * p)))
        down = _resize(x, (w2, h2), cv2.INTER_AREA)
        return _quant(_resize(down, (w, h), cv2.INTER_NEAREST).astype(np.float64))
    if fam == "rescale":
        if p == 1.0:
            return img.copy()
        w2 = max(1, int(round(w * p)))
        h2 = max(1, int(round(h * p)))
        down = _resize(x, (w2, h2), cv2.INTER_LINEAR)
        return _quant(_resize(down, (w, h), cv2.INTER_LINEAR).astype(np.float64))
    if fam == "rotation":
        if p == 0.0:
            return img.copy()
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        rot = cv2.getRotationMatrix2D(center, float(p), 1.0)
        warped = cv2.warpAffine(x.astype(np.float32), rot, (w, h),
                                flags=cv2.INTER_LINEAR)
        wr, hr = _inscribed_rect(w, h, float(p))
        top = (h - hr) // 2
        left = (w - wr) // 2
        crop = warped[top:top + hr, left:left + wr]
        return _quant(_resize(crop, (w, h), cv2.INTER_LINEAR).astype(np.float64))
    if fam == "shot_noise":
        x01 = x / 255.0
        noisy = rng.poisson(x01 * p).astype(np.float64) / p
        return _quant(np.clip(noisy, 0.0, 1.0) * 255.0)
    raise ContractError(f"unknown perturbation family {fam!r}")


# -------------------------------------------------------------------- sweep ----

def _file_seed(global_seed: int, name: str, family: str, level: int) -> int:
    h = hashlib.blake2b(f"{name}|{family}|{level}".encode(), digest_size=8,
                        key=str(global_seed).encode()).digest()
    return int.from_bytes(h, "little")


def _tree_hash(paths: list) -> str:
    agg = hashlib.sha256()
    for p in sorted(paths, key=lambda q: Path(q).name):
        agg.update(Path(p).name.encode())
        agg.update(hashlib.sha256(Path(p).read_bytes()).digest())
    return agg.hexdigest()[:16]


def sweep(manifest: Manifest, out_root, families=SWEEP_FAMILIES,
          levels=(1, 2, 3, 4, 5), seed: int = 0, split: str | None = None,
          limit: int | None = None, log=None) -> list:
    """Write family/level trees of perturbed copies plus a clean passthrough.

    Returns summary rows (family, level, count, tree_hash); also written
    to ``out_root``/summary.csv.  Per-file failures are recorded and
    skipped, not fatal.
    """
    for fam in families:
        if fam not in PARAM_GRIDS:
            raise ContractError(f"family {fam!r} is not sweepable over levels")
    for lv in levels:
        if not 1 <= int(lv) <= 5:
            raise ContractError(f"level must be 1..5, got {lv}")
    out_root = Path(out_root)
    entries = manifest.split(split) if split else list(manifest.entries)
    if limit is not None:
        entries = entries[:limit]
    if not entries:
        raise DataError("no manifest entries to perturb", code="EMPTY_SPLIT")
    named = [(f"{i:05d}_{Path(e.path).stem}.png", e) for i, e in enumerate(entries)]
    failures: list[dict] = []
    rows = []

    def derived_manifest(dir_path: Path, produced: list) -> None:
        ents = [ManifestEntry(path=str(dir_path / name), label=e.label, source=e.source,
                              split=e.split, artifact_box=e.artifact_box)
                for name, e in produced]
        Manifest(seed=seed, entries=ents,
                 metadata={"derived_from": manifest.content_hash()}).save(
            dir_path / "manifest.json")

    clean_dir = out_root / "clean"
    clean_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    for name, e in named:
        try:
            shutil.copyfile(e.path, clean_dir / name)
            produced.append((name, e))
        except OSError as exc:
            failures.append({"path": e.path, "family": "clean", "error": str(exc)})
    derived_manifest(clean_dir, produced)
    rows.append(("clean", 0, len(produced),
                 _tree_hash([clean_dir / n for n, _ in produced])))

    for fam in families:
        for lv in levels:
            lvl_dir = out_root / fam / f"level_{lv}"
            lvl_dir.mkdir(parents=True, exist_ok=True)
            produced = []
            for name, e in named:
                try:
                    img = load_image(e.path)
                    out = apply(img, PerturbationSpec(
                        family=fam, level=int(lv),
                        seed=_file_seed(seed, name, fam, int(lv))))
                    save_png(lvl_dir / name, out)
                    produced.append((name, e))
                except (OSError, DataError) as exc:
                    failures.append({"path": e.path, "family": fam,
                                     "level": int(lv), "error": str(exc)})
            derived_manifest(lvl_dir, produced)
            row = (fam, int(lv), len(produced),
                   _tree_hash([lvl_dir / n for n, _ in produced]))
            rows.append(row)
            if log:
                log(f"{fam} level {lv}: {row[2]} files, hash {row[3]}")

    with open(out_root / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["family", "level", "count", "tree_hash"])
        w.writerows(rows)
    if failures and log:
        log(f"{len(failures)} files failed; see summary metadata")
    return rows
