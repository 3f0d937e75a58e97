"""Peak-guided calibration module: scoring, peak aggregation, fusion.

Each stream gets a tiny head mapping its per-cell features to one anomaly
score (1x1 conv over the residual map, linear over the RGB tokens).  The
score grid is aggregated with a temperature log-sum-exp mean that behaves
like a soft max: small tau concentrates weight (and gradient) on the
highest-scoring cells, huge tau degrades to plain mean pooling.  The two
aggregates fuse additively, Z_local = Z_res + lambda * Z_rgb, with lambda
a learnable scalar that modulates the RGB term against the residual
anchor.

`top_k_peaks` maps the best-scoring cells back to pixel boxes so the
evidence a decision rests on can be drawn or scored against ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ContractError
from .params import ModelParams, uniform_fan_in
from .streams import RESIDUAL_RF, RESIDUAL_STRIDE


@dataclass(frozen=True)
class PgcmConfig:
    tau: float = 0.5          # fixed during training, never optimized
    lambda_init: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")


def init_pgcm_params(params: ModelParams, rng: np.random.Generator,
                     res_channels: int | None = 64, embed_dim: int | None = 64,
                     lambda_init: float = 0.1) -> None:
    """Heads for whichever streams exist; lambda only when RGB is fused."""
    if res_channels:
        params.add("head.res.w", uniform_fan_in(rng, (res_channels, 1), fan_in=res_channels))
        params.add("head.res.b", np.zeros(1))
    if embed_dim:
        params.add("head.rgb.w", uniform_fan_in(rng, (embed_dim, 1), fan_in=embed_dim))
        params.add("head.rgb.b", np.zeros(1))
        params.add("pgcm.lam", np.full(1, lambda_init))


def score_residual(fmap: np.ndarray, params: ModelParams):
    """1x1-conv head: (N, Gh, Gw, C) -> (N, Gh, Gw) scores."""
    out, cache = L.linear_forward(fmap, params["head.res.w"], params["head.res.b"])
    return out[..., 0], cache


def score_rgb(tokens: np.ndarray, params: ModelParams):
    """Linear head over tokens: (N, Gh, Gw, D) -> (N, Gh, Gw) scores."""
    out, cache = L.linear_forward(tokens, params["head.rgb.w"], params["head.rgb.b"])
    return out[..., 0], cache


def score_backward(dsmap: np.ndarray, cache):
    """Shared backward for both heads (they are the same linear form)."""
    dfeat, dw, db = L.linear_backward(dsmap[..., None], cache)
    return dfeat, dw, db


def aggregate_stream(smap: np.ndarray, tau: float) -> float:
    """Aggregate one score grid to a scalar; delegates to logsumexp_mean."""
    return L.logsumexp_mean(np.asarray(smap).ravel(), tau)


def fuse_local(z_res: float, z_rgb: float, lam: float) -> float:
    """Z_local = Z_res + lambda * Z_rgb. d/dlambda is exactly Z_rgb."""
    z = float(z_res) + float(lam) * float(z_rgb)
    if not np.isfinite(z):
        raise ContractError("non-finite fusion result")
    return z


# ------------------------------------------------------------------- peaks ----

@dataclass
class Peak:
    row: int
    col: int
    score: float
    box: tuple  # (x0, y0, x1, y1) inclusive pixel coordinates


@dataclass
class PeakSet:
    image_id: str
    stream: str
    k: int
    peaks: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "stream": self.stream,
            "k": self.k,
            "peaks": [{"row": p.row, "col": p.col, "score": p.score,
                       "box": list(p.box)} for p in self.peaks],
        }, sort_keys=True)


def residual_cell_box(row: int, col: int, h: int, w: int) -> tuple:
    """Receptive-field box of residual cell (row, col), clipped to the image.

    Three stacked 3x3/s2 convs give cell r the input rows
    [8r-7, 8r+7]; same for columns.
    """
    half = RESIDUAL_RF // 2
    cy, cx = RESIDUAL_STRIDE * row, RESIDUAL_STRIDE * col
    return (max(cx - half, 0), max(cy - half, 0),
            min(cx + half, w - 1), min(cy + half, h - 1))


def rgb_cell_box(row: int, col: int, p: int) -> tuple:
    """Patch cell (row, col) covers pixels [col*p, col*p + p - 1] etc."""
    return (col * p, row * p, col * p + p - 1, row * p + p - 1)


def top_k_peaks(smap: np.ndarray, k: int, stream: str, image_hw: tuple,
                patch_size: int = 14, image_id: str = "") -> PeakSet:
    """k highest cells of a (Gh, Gw) score grid, ties in row-major order."""
    s = np.asarray(smap, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError(f"score map must be 2-D, got shape {s.shape}")
    n = s.size
    if not 1 <= k <= n:
        raise ContractError(f"k={k} out of range 1..{n}")
    if stream not in ("res", "rgb"):
        raise ContractError(f"stream must be res or rgb, got {stream!r}")
    flat = s.ravel()
    order = np.argsort(-flat, kind="stable")[:k]
    h, w = image_hw
    ps = PeakSet(image_id=image_id, stream=stream, k=k)
    for idx in order:
        r, c = divmod(int(idx), s.shape[1])
        if stream == "res":
            box = residual_cell_box(r, c, h, w)
        else:
            box = rgb_cell_box(r, c, patch_size)
        ps.peaks.append(Peak(row=r, col=c, score=float(flat[idx]), box=box))
    return ps


def boxes_intersect(a: tuple, b: tuple) -> bool:
    """Inclusive-coordinate rectangle overlap test."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1
