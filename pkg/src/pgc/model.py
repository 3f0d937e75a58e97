"""End-to-end detector: two streams, peak calibration, additive decision.

Forward graph (batch form, float64 throughout):

    residual(I) -> CNN -> fmap  -> GAP ---+
                           |              +--> concat -> linear -> Z_global
    I/255 -> patch embed -> tokens -> GAP-+
                           |
    fmap   -> 1x1 head -> score map -> LSE(tau) -> Z_res
    tokens -> lin head -> score map -> LSE(tau) -> Z_rgb
    Z_local = Z_res + lambda * Z_rgb
    y_pred = Z_global + Z_local,  y_hat = sigmoid(y_pred)

y_pred is stored as that one sum, so the additivity identity
``y_pred == z_global + z_local`` holds bit-exactly on every pass.  The
final probability is thresholded strictly: fake iff y_hat > 0.5, so an
exact tie counts as real.

Ablation flags drop parts of the graph: either stream can be removed
(at least one must remain) and `pgcm=False` removes the scoring/fusion
path entirely, leaving y_pred = Z_global.

`gradcheck_model` wires the analytic gradients of every trainable array
into the finite-difference verifier; it is the module's own correctness
oracle and is cheap at small input sizes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from . import pgcm as P
from .errors import ContractError
from .params import ModelParams, uniform_fan_in
from .residual import compute_residual
from .streams import (ExtractorSpec, init_patch_params, init_residual_params,
                      patch_embed, patch_embed_backward, residual_encode,
                      residual_encode_backward)


@dataclass(frozen=True)
class ModelConfig:
    crop: int = 224
    tau: float = 0.5
    lambda_init: float = 0.1
    channels: tuple = (16, 32, 64)
    patch_size: int = 14
    embed_dim: int = 64
    res_stream: bool = True
    rgb_stream: bool = True
    pgcm: bool = True
    pad_mode: str = "zeros"

    def __post_init__(self):
        if not (self.res_stream or self.rgb_stream):
            raise ContractError("at least one stream must be enabled")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if len(self.channels) != 3:
            raise ContractError("residual encoder takes exactly three block widths")
        if self.crop % 8:
            raise ContractError(f"crop {self.crop} not divisible by 8")
        if self.rgb_stream and self.crop % self.patch_size:
            raise ContractError(
                f"crop {self.crop} not divisible by patch size {self.patch_size}")

    @property
    def spec(self) -> ExtractorSpec:
        return ExtractorSpec(patch_size=self.patch_size, embed_dim=self.embed_dim)


@dataclass
class PgcOutputs:
    """All logits of one forward pass; y_pred = z_global + z_local exactly."""
    z_res: float
    z_rgb: float
    z_local: float
    z_global: float
    y_pred: float
    y_hat: float


@dataclass
class FwdBatch:
    y_pred: np.ndarray
    y_hat: np.ndarray
    z_res: np.ndarray
    z_rgb: np.ndarray
    z_local: np.ndarray
    z_global: np.ndarray
    smap_res: np.ndarray | None
    smap_rgb: np.ndarray | None
    bn_updates: dict
    caches: dict | None

    def sample(self, i: int) -> PgcOutputs:
        return PgcOutputs(z_res=float(self.z_res[i]), z_rgb=float(self.z_rgb[i]),
                          z_local=float(self.z_local[i]), z_global=float(self.z_global[i]),
                          y_pred=float(self.y_pred[i]), y_hat=float(self.y_hat[i]))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded init; creation order is fixed so a seed pins every value."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    if cfg.res_stream:
        init_residual_params(params, rng, cfg.channels)
    if cfg.rgb_stream:
        init_patch_params(params, rng, cfg.patch_size, cfg.embed_dim)
    if cfg.pgcm:
        P.init_pgcm_params(
            params, rng,
            res_channels=cfg.channels[-1] if cfg.res_stream else None,
            embed_dim=cfg.embed_dim if cfg.rgb_stream else None,
            lambda_init=cfg.lambda_init)
    width = (cfg.channels[-1] if cfg.res_stream else 0) \
        + (cfg.embed_dim if cfg.rgb_stream else 0)
    params.add("cls.w", uniform_fan_in(rng, (width, 1), fan_in=width))
    params.add("cls.b", np.zeros(1))
    return params


def model_config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a config from its dict form (e.g. checkpoint metadata)."""
    d = dict(d)
    if "channels" in d:
        d["channels"] = tuple(d["channels"])
    try:
        return ModelConfig(**d)
    except TypeError as exc:
        raise ContractError(f"bad model config: {exc}") from exc


def validate_geometry(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != 3:
        raise ContractError(f"expected (N, H, W, 3) batch, got {x.shape}")
    if x.shape[1] != cfg.crop or x.shape[2] != cfg.crop:
        raise ContractError(
            f"input is {x.shape[1]}x{x.shape[2]}, config expects {cfg.crop}x{cfg.crop}")
    return x


def forward_batch(images: np.ndarray, params: ModelParams, cfg: ModelConfig,
                  mode: str = "eval", want_caches: bool = False) -> FwdBatch:
    """Run the full graph over a (N, crop, crop, 3) batch in 0..255 units."""
    x = validate_geometry(images, cfg)
    n = x.shape[0]
    caches: dict = {}
    gaps = []
    zeros = np.zeros(n)

    z_res = zeros
    smap_res = None
    if cfg.res_stream:
        res = compute_residual(x)
        fmap, c_enc, bn_updates = residual_encode(
            res, params, mode=mode, channels=cfg.channels, pad_mode=cfg.pad_mode)
        gap_res, c_gap_res = L.global_avg_pool_forward(fmap)
        gaps.append(gap_res)
        if cfg.pgcm:
            smap_res, c_head_res = P.score_residual(fmap, params)
            z_res = L.lse_mean_rows(smap_res.reshape(n, -1), cfg.tau)
        if want_caches:
            caches["res"] = (c_enc, c_gap_res)
            if cfg.pgcm:
                caches["head.res"] = (c_head_res, smap_res)
    else:
        bn_updates = {}

    z_rgb = zeros
    smap_rgb = None
    if cfg.rgb_stream:
        tokens, c_tok = patch_embed(x / 255.0, params, cfg.spec)
        gap_rgb, c_gap_rgb = L.global_avg_pool_forward(tokens)
        gaps.append(gap_rgb)
        if cfg.pgcm:
            smap_rgb, c_head_rgb = P.score_rgb(tokens, params)
            z_rgb = L.lse_mean_rows(smap_rgb.reshape(n, -1), cfg.tau)
        if want_caches:
            caches["rgb"] = (c_tok, c_gap_rgb)
            if cfg.pgcm:
                caches["head.rgb"] = (c_head_rgb, smap_rgb)

    gcat = np.concatenate(gaps, axis=1)
    zg2, c_cls = L.linear_forward(gcat, params["cls.w"], params["cls.b"])
    z_global = zg2[:, 0]
    if want_caches:
        caches["cls"] = (c_cls, [g.shape[1] for g in gaps])

    if cfg.pgcm:
        lam = float(params["pgcm.lam"][0]) if "pgcm.lam" in params else 0.0
        if cfg.res_stream and cfg.rgb_stream:
            z_local = z_res + lam * z_rgb
        elif cfg.res_stream:
            z_local = z_res
        else:
            z_local = lam * z_rgb
    else:
        z_local = zeros

    y_pred = z_global + z_local
    return FwdBatch(y_pred=y_pred, y_hat=L.sigmoid(y_pred), z_res=z_res, z_rgb=z_rgb,
                    z_local=z_local, z_global=z_global, smap_res=smap_res,
                    smap_rgb=smap_rgb, bn_updates=bn_updates,
                    caches=caches if want_caches else None)


def backward_batch(dy_pred: np.ndarray, fwd: FwdBatch, params: ModelParams,
                   cfg: ModelConfig) -> dict:
    """Gradients of every trainable array from d loss / d y_pred."""
    if fwd.caches is None:
        raise ContractError("forward was run without want_caches=True")
    n = dy_pred.shape[0]
    grads: dict[str, np.ndarray] = {}

    # classifier (z_global path)
    c_cls, gap_widths = fwd.caches["cls"]
    dgcat, dw, db = L.linear_backward(dy_pred[:, None], c_cls)
    grads["cls.w"] = dw
    grads["cls.b"] = db
    splits = np.cumsum(gap_widths)[:-1]
    dgaps = np.split(dgcat, splits, axis=1)
    gi = 0

    # fusion scalars (z_local path): Z_local = Z_res + lam * Z_rgb
    lam = float(params["pgcm.lam"][0]) if (cfg.pgcm and "pgcm.lam" in params) else 0.0
    dz_res = dy_pred
    dz_rgb = dy_pred * lam
    if cfg.pgcm and cfg.rgb_stream:
        grads["pgcm.lam"] = np.array([float(np.dot(dy_pred, fwd.z_rgb))])

    if cfg.res_stream:
        c_enc, c_gap = fwd.caches["res"]
        dfmap = L.global_avg_pool_backward(dgaps[gi], c_gap)
        gi += 1
        if cfg.pgcm:
            c_head, smap = fwd.caches["head.res"]
            w_soft = L.lse_mean_rows_grad(smap.reshape(n, -1), cfg.tau)
            dsmap = (dz_res[:, None] * w_soft).reshape(smap.shape)
            dfeat, dhw, dhb = P.score_backward(dsmap, c_head)
            grads["head.res.w"] = dhw
            grads["head.res.b"] = dhb
            dfmap = dfmap + dfeat
        g = residual_encode_backward(dfmap, c_enc, mode="train")
        g.pop("__input__")
        grads.update(g)

    if cfg.rgb_stream:
        c_tok, c_gap = fwd.caches["rgb"]
        dtok = L.global_avg_pool_backward(dgaps[gi], c_gap)
        gi += 1
        if cfg.pgcm:
            c_head, smap = fwd.caches["head.rgb"]
            w_soft = L.lse_mean_rows_grad(smap.reshape(n, -1), cfg.tau)
            dsmap = (dz_rgb[:, None] * w_soft).reshape(smap.shape)
            dfeat, dhw, dhb = P.score_backward(dsmap, c_head)
            grads["head.rgb.w"] = dhw
            grads["head.rgb.b"] = dhb
            dtok = dtok + dfeat
        g = patch_embed_backward(dtok, c_tok)
        g.pop("__input__")
        grads.update(g)

    return grads


def forward(image: np.ndarray, params: ModelParams, cfg: ModelConfig,
            mode: str = "eval") -> PgcOutputs:
    """Single-image forward; the image must already be at crop size."""
    return forward_batch(image, params, cfg, mode=mode).sample(0)


def loss(outputs: PgcOutputs, label: int) -> float:
    """BCE of the fused logit; gradient w.r.t. y_pred is sigmoid(y_pred) - y."""
    return L.bce_from_logit(outputs.y_pred, label)


def classify(y_hat: float) -> int:
    """1 = fake iff strictly above 0.5; an exact tie is called real."""
    return int(y_hat > 0.5)


def predict(image: np.ndarray, params: ModelParams, cfg: ModelConfig,
            k: int = 3, image_id: str = "") -> tuple[float, list]:
    """Probability plus top-k peak boxes for each enabled scoring stream."""
    from .data import center_crop

    img = center_crop(np.asarray(image), cfg.crop)
    fwd = forward_batch(img, params, cfg, mode="eval")
    peaks = []
    hw = (cfg.crop, cfg.crop)
    if fwd.smap_res is not None:
        peaks.append(P.top_k_peaks(fwd.smap_res[0], k, "res", hw,
                                   cfg.patch_size, image_id))
    if fwd.smap_rgb is not None:
        peaks.append(P.top_k_peaks(fwd.smap_rgb[0], k, "rgb", hw,
                                   cfg.patch_size, image_id))
    return float(fwd.y_hat[0]), peaks


def gradcheck_model(image: np.ndarray, label: int, params: ModelParams,
                    cfg: ModelConfig, step: float = 1e-5) -> L.GradReport:
    """Verify every trainable gradient on one input via central differences."""
    x = validate_geometry(image, cfg)
    y = np.array([float(label)])

    def loss_fn() -> float:
        fwd = forward_batch(x, params, cfg, mode="train")
        return L.bce_from_logits_mean(fwd.y_pred, y)

    fwd = forward_batch(x, params, cfg, mode="train", want_caches=True)
    dy = (L.sigmoid(fwd.y_pred) - y)
    grads = backward_batch(dy, fwd, params, cfg)
    return L.finite_diff_check(loss_fn, params.trainable_arrays(), grads, step=step)
