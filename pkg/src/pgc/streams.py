"""The two spatial encoders.

Residual stream: three blocks of (3x3 conv, stride 2, pad 1 -> batch norm
-> ReLU), channel plan 3 -> 16 -> 32 -> 64 by default.  Output stride is
2^3 = 8, so a 224x224 input yields a 28x28 map; each cell sees a 15x15
input window centered on pixel 8*cell (three stacked 3x3/s2 convs).

RGB stream: a deliberately small patch-local extractor standing in for a
pretrained ViT backbone.  The image (scaled to [0,1]) is cut into
non-overlapping p x p patches (p=14 default), each flattened and embedded
588 -> D -> ReLU -> D with no mixing across patches, so token (r, c)
depends only on patch (r, c).  `ExtractorSpec.kind == "external"` reserves
the mount point for a real backbone; only the reference kind is
implemented here.

Both encoders are built from layers.py primitives and return the caches
needed for exact backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import ContractError
from .params import ModelParams, uniform_fan_in

RESIDUAL_STRIDE = 8
RESIDUAL_RF = 15  # receptive field side, input pixels


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "reference-patch-embed"
    patch_size: int = 14
    embed_dim: int = 64

    def __post_init__(self):
        if self.kind not in ("reference-patch-embed", "external"):
            raise ContractError(f"unknown extractor kind {self.kind!r}")


# ------------------------------------------------------------- residual CNN --

def init_residual_params(params: ModelParams, rng: np.random.Generator,
                         channels: tuple = (16, 32, 64)) -> None:
    cin = 3
    for i, cout in enumerate(channels, start=1):
        params.add(f"res.conv{i}.w",
                   uniform_fan_in(rng, (3, 3, cin, cout), fan_in=9 * cin))
        params.add(f"res.bn{i}.gamma", np.ones(cout))
        params.add(f"res.bn{i}.beta", np.zeros(cout))
        params.add(f"res.bn{i}.run_mean", np.zeros(cout), trainable=False)
        params.add(f"res.bn{i}.run_var", np.ones(cout), trainable=False)
        cin = cout


def residual_encode(res: np.ndarray, params: ModelParams, mode: str = "eval",
                    channels: tuple = (16, 32, 64), pad_mode: str = "zeros",
                    momentum: float = 0.1):
    """Encode a residual batch (N, H, W, 3) to (N, H/8, W/8, C).

    Returns (fmap, caches, bn_updates) where bn_updates maps running-stat
    names to their new values in train mode (empty in eval mode).  The
    caller owns writing those back; the forward itself never mutates
    params.
    """
    x = np.asarray(res, dtype=np.float64)
    if x.ndim != 4:
        x = x[None]
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ContractError(f"spatial dims must be divisible by 8, got {x.shape[1:3]}")
    caches = []
    bn_updates: dict[str, np.ndarray] = {}
    for i in range(1, len(channels) + 1):
        x, c_conv = L.conv3x3s2_forward(x, params[f"res.conv{i}.w"], pad_mode)
        x, c_bn, rm, rv = L.batchnorm_forward(
            x, params[f"res.bn{i}.gamma"], params[f"res.bn{i}.beta"],
            params[f"res.bn{i}.run_mean"], params[f"res.bn{i}.run_var"],
            mode=mode, momentum=momentum)
        if mode == "train":
            bn_updates[f"res.bn{i}.run_mean"] = rm
            bn_updates[f"res.bn{i}.run_var"] = rv
        x, c_relu = L.relu_forward(x)
        caches.append((c_conv, c_bn, c_relu))
    return x, caches, bn_updates


def residual_encode_backward(dout: np.ndarray, caches, mode: str = "train") -> dict:
    """Gradients of all residual-encoder parameters plus the input."""
    grads: dict[str, np.ndarray] = {}
    dx = dout
    for i in range(len(caches), 0, -1):
        c_conv, c_bn, c_relu = caches[i - 1]
        dx = L.relu_backward(dx, c_relu)
        dx, dgamma, dbeta = L.batchnorm_backward(dx, c_bn, mode=mode)
        dx, dw = L.conv3x3s2_backward(dx, c_conv)
        grads[f"res.conv{i}.w"] = dw
        grads[f"res.bn{i}.gamma"] = dgamma
        grads[f"res.bn{i}.beta"] = dbeta
    grads["__input__"] = dx
    return grads


# ------------------------------------------------------------- patch tokens --

def init_patch_params(params: ModelParams, rng: np.random.Generator,
                      patch_size: int = 14, embed_dim: int = 64) -> None:
    din = patch_size * patch_size * 3
    params.add("rgb.embed.w", uniform_fan_in(rng, (din, embed_dim), fan_in=din))
    params.add("rgb.embed.b", np.zeros(embed_dim))
    params.add("rgb.mlp.w", uniform_fan_in(rng, (embed_dim, embed_dim), fan_in=embed_dim))
    params.add("rgb.mlp.b", np.zeros(embed_dim))


def patchify(x01: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, 3) -> (N, H/p, W/p, p*p*3) flattened non-overlapping patches."""
    n, h, w, c = x01.shape
    if h % p or w % p:
        raise ContractError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    t = x01.reshape(n, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t).reshape(n, gh, gw, p * p * c)


def unpatchify_grad(dpatch: np.ndarray, p: int, c: int = 3) -> np.ndarray:
    n, gh, gw, _ = dpatch.shape
    t = dpatch.reshape(n, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t).reshape(n, gh * p, gw * p, c)


def patch_embed(image01: np.ndarray, params: ModelParams,
                spec: ExtractorSpec = ExtractorSpec()):
    """Token grid (N, H/p, W/p, D) from a [0,1]-scaled image batch."""
    if spec.kind != "reference-patch-embed":
        raise ContractError(
            f"extractor kind {spec.kind!r} is a declared mount point, not implemented here")
    x = np.asarray(image01, dtype=np.float64)
    if x.ndim != 4:
        x = x[None]
    patches = patchify(x, spec.patch_size)
    h, c_embed = L.linear_forward(patches, params["rgb.embed.w"], params["rgb.embed.b"])
    a, c_relu = L.relu_forward(h)
    tokens, c_mlp = L.linear_forward(a, params["rgb.mlp.w"], params["rgb.mlp.b"])
    return tokens, (c_embed, c_relu, c_mlp, spec.patch_size)


def patch_embed_backward(dout: np.ndarray, cache) -> dict:
    c_embed, c_relu, c_mlp, p = cache
    da, dw2, db2 = L.linear_backward(dout, c_mlp)
    dh = L.relu_backward(da, c_relu)
    dpatch, dw1, db1 = L.linear_backward(dh, c_embed)
    return {
        "rgb.embed.w": dw1, "rgb.embed.b": db1,
        "rgb.mlp.w": dw2, "rgb.mlp.b": db2,
        "__input__": unpatchify_grad(dpatch, p),
    }
