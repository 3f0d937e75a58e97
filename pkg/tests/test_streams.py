import numpy as np
import pytest

import pgc.layers as L
import pgc.streams as S
from pgc.errors import ContractError
from pgc.params import ModelParams


def _res_params(seed=0, channels=(4, 6, 8)):
    p = ModelParams()
    S.init_residual_params(p, np.random.default_rng(seed), channels)
    return p


def _rgb_params(seed=0, patch=8, dim=16):
    p = ModelParams()
    S.init_patch_params(p, np.random.default_rng(seed), patch, dim)
    return p


def test_extractor_spec_kinds():
    S.ExtractorSpec()  # reference kind constructs
    ext = S.ExtractorSpec(kind="external")  # declared mount point constructs too
    with pytest.raises(ContractError):
        S.ExtractorSpec(kind="resnet")
    with pytest.raises(ContractError):
        S.patch_embed(np.zeros((1, 16, 16, 3)), _rgb_params(), ext)


def test_residual_param_names_and_flags():
    p = _res_params()
    assert set(p.arrays) == {
        f"res.{k}" for k in (
            "conv1.w", "bn1.gamma", "bn1.beta", "bn1.run_mean", "bn1.run_var",
            "conv2.w", "bn2.gamma", "bn2.beta", "bn2.run_mean", "bn2.run_var",
            "conv3.w", "bn3.gamma", "bn3.beta", "bn3.run_mean", "bn3.run_var")}
    assert not p.trainable["res.bn1.run_mean"]
    assert not p.trainable["res.bn2.run_var"]
    assert p.trainable["res.conv1.w"]
    assert p["res.conv1.w"].shape == (3, 3, 3, 4)
    assert p["res.conv2.w"].shape == (3, 3, 4, 6)


def test_shape_law_stride_8():
    p = _res_params()
    for h, w in ((32, 32), (48, 64), (224, 224)):
        x = np.zeros((1, h, w, 3))
        fmap, _, _ = S.residual_encode(x, p, channels=(4, 6, 8))
        assert fmap.shape == (1, h // 8, w // 8, 8)
    with pytest.raises(ContractError):
        S.residual_encode(np.zeros((1, 20, 32, 3)), p, channels=(4, 6, 8))


def test_residual_encode_pure_and_train_updates():
    p = _res_params()
    x = np.random.default_rng(1).normal(size=(2, 16, 16, 3))
    before = {k: v.copy() for k, v in p.arrays.items()}
    fmap, caches, upd = S.residual_encode(x, p, mode="train", channels=(4, 6, 8))
    assert set(upd) == {f"res.bn{i}.run_{s}" for i in (1, 2, 3)
                        for s in ("mean", "var")}
    for k, v in before.items():
        assert np.array_equal(p[k], v)  # forward never mutates params
    _, _, upd_eval = S.residual_encode(x, p, mode="eval", channels=(4, 6, 8))
    assert upd_eval == {}


def test_translation_covariance_with_wrap_padding():
    # shifting the input by one stride shifts the map by one cell
    p = _res_params(seed=2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 32, 32, 3))
    base, _, _ = S.residual_encode(x, p, mode="eval", channels=(4, 6, 8),
                                   pad_mode="wrap")
    rolled, _, _ = S.residual_encode(np.roll(x, 8, axis=1), p, mode="eval",
                                     channels=(4, 6, 8), pad_mode="wrap")
    assert np.abs(np.roll(base, 1, axis=1) - rolled).max() < 1e-9


def test_zero_input_maps_to_bn_shift_only():
    p = _res_params()
    fmap, _, _ = S.residual_encode(np.zeros((1, 16, 16, 3)), p, mode="eval",
                                   channels=(4, 6, 8))
    # conv(0)=0 (no bias), eval BN at init is identity, relu(0)=0
    assert np.array_equal(fmap, np.zeros_like(fmap))


def test_residual_backward_numeric():
    channels = (3, 4, 5)
    p = _res_params(seed=4, channels=channels)
    rng = np.random.default_rng(6)  # a few seeds park a relu on its kink; this one is generic
    x = rng.normal(size=(1, 16, 16, 3))
    r = rng.normal(size=(1, 2, 2, 5))

    def loss_fn():
        fmap, _, _ = S.residual_encode(x, p, mode="train", channels=channels)
        return float(np.sum(fmap * r))

    _, caches, _ = S.residual_encode(x, p, mode="train", channels=channels)
    grads = S.residual_encode_backward(r, caches, mode="train")
    din = grads.pop("__input__")
    assert din.shape == x.shape
    rep = L.finite_diff_check(loss_fn, p.trainable_arrays(), grads, step=1e-5)
    assert rep.passed(1e-4), rep.summary()


def test_patchify_round_trip_and_layout():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 8, 8, 3))
    t = S.patchify(x, 4)
    assert t.shape == (1, 2, 2, 48)
    # first patch is the top-left 4x4 block, flattened row-major
    assert np.array_equal(t[0, 0, 0], x[0, :4, :4, :].reshape(-1))
    assert np.array_equal(t[0, 1, 0], x[0, 4:, :4, :].reshape(-1))
    back = S.unpatchify_grad(t, 4)
    assert np.array_equal(back, x)
    with pytest.raises(ContractError):
        S.patchify(x, 3)


def test_patch_locality():
    p = _rgb_params(seed=7)
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(1, 16, 16, 3))
    spec = S.ExtractorSpec(patch_size=8, embed_dim=16)
    base, _ = S.patch_embed(x, p, spec)
    x2 = x.copy()
    x2[0, 3, 5, 1] += 0.25  # inside patch (0, 0)
    moved, _ = S.patch_embed(x2, p, spec)
    diff = np.abs(moved - base).sum(axis=3)[0]
    assert diff[0, 0] > 0.0
    assert diff[0, 1] == 0.0 and diff[1, 0] == 0.0 and diff[1, 1] == 0.0


def test_token_grid_shape_law():
    p = _rgb_params(patch=4, dim=16)
    spec = S.ExtractorSpec(patch_size=4, embed_dim=16)
    tokens, _ = S.patch_embed(np.zeros((2, 24, 16, 3)), p, spec)
    assert tokens.shape == (2, 6, 4, 16)


def test_patch_embed_backward_numeric():
    p = _rgb_params(seed=9, patch=4, dim=8)
    spec = S.ExtractorSpec(patch_size=4, embed_dim=8)
    rng = np.random.default_rng(10)
    x = rng.uniform(size=(1, 8, 8, 3))
    r = rng.normal(size=(1, 2, 2, 8))

    def loss_fn():
        t, _ = S.patch_embed(x, p, spec)
        return float(np.sum(t * r))

    _, cache = S.patch_embed(x, p, spec)
    grads = S.patch_embed_backward(r, cache)
    din = grads.pop("__input__")
    assert din.shape == x.shape
    rep = L.finite_diff_check(loss_fn, p.trainable_arrays(), grads, step=1e-5)
    assert rep.passed(1e-4), rep.summary()


def test_receptive_field_constant():
    assert S.RESIDUAL_STRIDE == 8
    assert S.RESIDUAL_RF == 15
    # empirical: poke one pixel, see which eval-mode cells move (linear path,
    # gamma small enough to keep relu active is not needed since we compare maps)
    channels = (2, 2, 2)
    p = ModelParams()
    rng = np.random.default_rng(11)
    S.init_residual_params(p, rng, channels)
    # make every conv tap positive so nothing cancels, bypass relu zeroing
    for i in (1, 2, 3):
        p[f"res.conv{i}.w"][...] = np.abs(p[f"res.conv{i}.w"]) + 0.05
    x = np.zeros((1, 64, 64, 3))
    base, _, _ = S.residual_encode(x, p, mode="eval", channels=channels)
    x[0, 32, 32, 0] = 1.0
    poked, _, _ = S.residual_encode(x, p, mode="eval", channels=channels)
    rows = np.where(np.abs(poked - base).sum(axis=(0, 2, 3)) > 1e-12)[0]
    # pixel 32 sits at cell 4; cells within (15-1)/2 = 7 px radius map to 4 +/- ~1
    assert rows.min() >= 32 // 8 - 1
    assert rows.max() <= 32 // 8 + 1
