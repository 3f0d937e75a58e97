"""Manifest, standardization, and synthetic-corpus tests.

Split sizes and subsampling are checked against hand-computed floor
arithmetic; determinism is checked by hashing the produced image bytes.
"""
import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pgc.data import (
    Manifest,
    ManifestEntry,
    SamplingPolicy,
    SynthConfig,
    build_manifest,
    center_crop,
    config_hash,
    load_image,
    prep_dataset,
    sample_frames,
    save_png,
    synth_dataset,
    write_stats_csv,
)
from pgc.errors import ContractError, DataError


def _write_images(d: Path, names, size=12, seed=0):
    rng = np.random.default_rng(seed)
    d.mkdir(parents=True, exist_ok=True)
    for n in names:
        save_png(d / n, rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


def _tree_bytes_hash(d: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(d.rglob("*.png")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- manifest ----

def _toy_manifest():
    return Manifest(seed=3, entries=[
        ManifestEntry("a/x.png", "real", "real", "train"),
        ManifestEntry("b/y.png", "fake", "genA", "eval", artifact_box=[1, 2, 8, 9]),
        ManifestEntry("b/z.png", "fake", "genB", "test"),
    ], metadata={"note": "toy"})


def test_manifest_save_load_round_trip(tmp_path):
    man = _toy_manifest()
    man.save(tmp_path / "m.json")
    back = Manifest.load(tmp_path / "m.json")
    assert back.seed == 3 and back.version == 1
    assert back.metadata == {"note": "toy"}
    assert [e.to_dict() for e in back.entries] == [e.to_dict() for e in man.entries]
    assert back.entries[1].artifact_box == [1, 2, 8, 9]
    assert back.entries[0].artifact_box is None


def test_manifest_load_missing(tmp_path):
    with pytest.raises(DataError) as ei:
        Manifest.load(tmp_path / "nope.json")
    assert ei.value.code == "MISSING_MANIFEST"


@pytest.mark.parametrize("text", [
    "not json at all",
    json.dumps({"version": 1}),                       # no entries/seed
    json.dumps({"version": 1, "seed": 0, "entries": [{"path": "p"}]}),
])
def test_manifest_load_malformed(tmp_path, text):
    p = tmp_path / "m.json"
    p.write_text(text)
    with pytest.raises(DataError) as ei:
        Manifest.load(p)
    assert ei.value.code == "BAD_MANIFEST"


def test_manifest_validate_rejects():
    dup = Manifest(seed=0, entries=[
        ManifestEntry("p.png", "real", "s", "train"),
        ManifestEntry("p.png", "fake", "s", "train")])
    with pytest.raises(DataError) as ei:
        dup.validate()
    assert ei.value.code == "BAD_MANIFEST"

    bad_label = Manifest(seed=0, entries=[ManifestEntry("q.png", "synthetic", "s", "train")])
    with pytest.raises(DataError):
        bad_label.validate()

    bad_split = Manifest(seed=0, entries=[ManifestEntry("q.png", "real", "s", "val")])
    with pytest.raises(DataError):
        bad_split.validate()


def test_manifest_split_and_counts():
    man = _toy_manifest()
    assert [e.path for e in man.split("eval")] == ["b/y.png"]
    assert man.counts() == {"real": 1, "fake": 2}


def test_content_hash_oracle_and_metadata_independence():
    man = _toy_manifest()
    doc = {"version": 1, "seed": 3, "entries": [e.to_dict() for e in man.entries]}
    want = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    assert man.content_hash() == want
    man.metadata["extra"] = "ignored"
    assert man.content_hash() == want
    man.entries[0].split = "test"
    assert man.content_hash() != want


def test_config_hash_is_order_free():
    assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
    assert len(config_hash({})) == 16


# ----------------------------------------------------------------- file io ----

def test_png_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (9, 7, 3), dtype=np.uint8)
    save_png(tmp_path / "deep" / "x.png", img)   # creates parents
    assert np.array_equal(load_image(tmp_path / "deep" / "x.png"), img)


def test_load_image_missing(tmp_path):
    with pytest.raises(DataError) as ei:
        load_image(tmp_path / "gone.png")
    assert ei.value.code == "MISSING_IMAGE"


def test_stats_csv(tmp_path):
    man = _toy_manifest()
    write_stats_csv(man, tmp_path / "stats.csv")
    with open(tmp_path / "stats.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["source", "type", "count"]
    assert rows[1:] == [["genA", "fake", "1"], ["genB", "fake", "1"], ["real", "real", "1"]]


# ------------------------------------------------------------ crop / frames ----

def test_center_crop_window():
    img = np.arange(7 * 9 * 3, dtype=np.uint8).reshape(7, 9, 3)
    out = center_crop(img, 3)
    # offsets floor the odd remainders: top=(7-3)//2=2, left=(9-3)//2=3
    assert np.array_equal(out, img[2:5, 3:6])


def test_center_crop_batch_and_exact_fit():
    batch = np.random.default_rng(0).integers(0, 256, (2, 5, 5, 3), dtype=np.uint8)
    out = center_crop(batch, 5)
    assert out.shape == (2, 5, 5, 3)
    assert np.array_equal(out, batch)


def test_center_crop_too_small():
    img = np.zeros((4, 10, 3), dtype=np.uint8)
    with pytest.raises(DataError) as ei:
        center_crop(img, 5, path="tiny.png")
    assert ei.value.code == "TOO_SMALL"
    assert "tiny.png" in str(ei.value)


def test_sample_frames_interval():
    frames = list(range(61))
    pol = SamplingPolicy(default_interval=60, short_interval=30,
                         short_sources=frozenset({"quick"}))
    assert sample_frames(frames, pol) == [0, 60]
    assert sample_frames(frames, pol, source="quick") == [0, 30, 60]
    assert sample_frames([7], pol) == [7]


def test_sample_frames_empty():
    with pytest.raises(DataError) as ei:
        sample_frames([], SamplingPolicy(), source="cam")
    assert ei.value.code == "EMPTY_SEQUENCE"


def test_sampling_policy_validation():
    with pytest.raises(ContractError):
        SamplingPolicy(default_interval=0)
    with pytest.raises(ContractError):
        SamplingPolicy(short_interval=-3)


# ------------------------------------------------------------ manifest build ----

def test_build_manifest_balances_and_splits(tmp_path):
    _write_images(tmp_path / "real", [f"r{i:02d}.png" for i in range(20)])
    _write_images(tmp_path / "fa", [f"a{i}.png" for i in range(10)], seed=1)
    _write_images(tmp_path / "fb", [f"b{i}.png" for i in range(5)], seed=2)
    man = build_manifest(tmp_path / "real", [("genA", tmp_path / "fa"),
                                             ("genB", tmp_path / "fb")],
                         fractions=(0.8, 0.1, 0.1), seed=4)
    assert man.counts() == {"real": 15, "fake": 15}

    # per-source split sizes follow floor-of-cumulative arithmetic
    def sizes(source):
        es = [e for e in man.entries if e.source == source]
        return tuple(sum(e.split == s for e in es) for s in ("train", "eval", "test"))

    assert sizes("real") == (12, 1, 2)   # floor([12.0, 13.5, 15]) -> 12, 1, 2
    assert sizes("genA") == (8, 1, 1)
    assert sizes("genB") == (4, 0, 1)    # floor([4.0, 4.5, 5]) -> 4, 0, 1

    paths = [e.path for e in man.entries]
    assert paths == sorted(paths)
    assert man.metadata["fractions"] == [0.8, 0.1, 0.1]

    again = build_manifest(tmp_path / "real", [("genA", tmp_path / "fa"),
                                               ("genB", tmp_path / "fb")],
                           fractions=(0.8, 0.1, 0.1), seed=4)
    assert again.content_hash() == man.content_hash()
    other = build_manifest(tmp_path / "real", [("genA", tmp_path / "fa"),
                                               ("genB", tmp_path / "fb")],
                           fractions=(0.8, 0.1, 0.1), seed=5)
    assert other.content_hash() != man.content_hash()


def test_build_manifest_errors(tmp_path):
    _write_images(tmp_path / "real", ["r.png"])
    _write_images(tmp_path / "fake", ["f0.png", "f1.png"])
    (tmp_path / "empty").mkdir()

    with pytest.raises(DataError) as ei:
        build_manifest(tmp_path / "empty", [("g", tmp_path / "fake")])
    assert ei.value.code == "EMPTY_SOURCE"

    with pytest.raises(DataError) as ei:
        build_manifest(tmp_path / "real", [("g", tmp_path / "empty")])
    assert ei.value.code == "EMPTY_SOURCE"

    with pytest.raises(DataError) as ei:
        build_manifest(tmp_path / "real", [("g", tmp_path / "fake")])
    assert ei.value.code == "INSUFFICIENT_REAL"

    with pytest.raises(ContractError):
        build_manifest(tmp_path / "real", [("g", tmp_path / "fake")],
                       fractions=(0.5, 0.5, 0.5))


# -------------------------------------------------------------- preparation ----

def test_prep_dataset_end_to_end(tmp_path):
    real = tmp_path / "raw_real"
    _write_images(real, [f"r{i}.png" for i in range(6)], size=12)
    save_png(real / "small.png", np.zeros((4, 4, 3), dtype=np.uint8))  # rejected

    vids = tmp_path / "raw_fake"
    _write_images(vids / "vid1", [f"f{i:02d}.png" for i in range(4)], size=14, seed=3)
    _write_images(vids / "vid2", [f"f{i:02d}.png" for i in range(3)], size=14, seed=4)
    _write_images(vids, ["loose.png"], size=14, seed=5)

    man = prep_dataset(real, [("vidsrc", vids)], tmp_path / "out", crop_size=8,
                       policy=SamplingPolicy(default_interval=2),
                       fractions=(0.6, 0.2, 0.2), seed=0)

    # vid1 keeps frames 0 and 2, vid2 keeps 0 and 2, plus the loose file
    assert man.counts() == {"real": 5, "fake": 5}
    fake_names = sorted(Path(e.path).name for e in man.entries if e.label == "fake")
    assert fake_names == ["loose.png", "vid1_f00.png", "vid1_f02.png",
                          "vid2_f00.png", "vid2_f02.png"]

    for e in man.entries:
        img = load_image(e.path)
        assert img.shape == (8, 8, 3)
        assert e.split in ("train", "eval", "test")

    rej = man.metadata["rejected"]
    assert len(rej) == 1 and rej[0]["path"].endswith("small.png")
    assert (tmp_path / "out" / "manifest.json").exists()
    assert (tmp_path / "out" / "stats.csv").exists()
    assert Manifest.load(tmp_path / "out" / "manifest.json").content_hash() \
        == man.content_hash()


# ---------------------------------------------------------------- synthetic ----

SMALL = dict(size=32, count_per_class=5, box_size=8, smoothness=4, seed=9)


def test_synth_config_validation():
    with pytest.raises(ContractError):
        SynthConfig(size=16, box_size=32)
    with pytest.raises(ContractError):
        SynthConfig(amplitude=-1.0)
    with pytest.raises(ContractError):
        SynthConfig(pattern="stripes")


def test_synth_dataset_contents(tmp_path):
    man = synth_dataset(SynthConfig(**SMALL), tmp_path / "d")
    assert man.counts() == {"real": 5, "fake": 5}
    # fractions (0.8, 0, 0.2) at n=5: floor([4.0, 4.0, 5.0]) per class
    assert len(man.split("train")) == 8
    assert len(man.split("eval")) == 0
    assert len(man.split("test")) == 2

    for e in man.entries:
        assert Path(e.path).exists()
        assert e.source == "synth"
        if e.label == "real":
            assert e.artifact_box is None
        else:
            x0, y0, x1, y1 = e.artifact_box
            assert x1 - x0 == 7 and y1 - y0 == 7
            assert 0 <= x0 and x1 <= 31 and 0 <= y0 and y1 <= 31

    md = man.metadata
    assert md["generator"] == "synth"
    assert md["config_hash"] == config_hash(md["config"])
    paths = [e.path for e in man.entries]
    assert paths == sorted(paths)


def test_synth_dataset_deterministic(tmp_path):
    a = synth_dataset(SynthConfig(**SMALL), tmp_path / "a")
    b = synth_dataset(SynthConfig(**SMALL), tmp_path / "b")
    assert _tree_bytes_hash(tmp_path / "a") == _tree_bytes_hash(tmp_path / "b")
    assert [e.to_dict() | {"path": Path(e.path).name} for e in a.entries] \
        == [e.to_dict() | {"path": Path(e.path).name} for e in b.entries]

    c = synth_dataset(SynthConfig(**SMALL | {"seed": 10}), tmp_path / "c")
    assert _tree_bytes_hash(tmp_path / "c") != _tree_bytes_hash(tmp_path / "a")


def test_synth_boxes_avoid_center_when_forced(tmp_path):
    cfg = SynthConfig(**SMALL | {"outside_center_prob": 1.0, "count_per_class": 12})
    man = synth_dataset(cfg, tmp_path / "d")
    c = 32 // 3
    m0 = (32 - c) // 2
    m1 = m0 + c
    hit = 0
    for e in man.entries:
        if e.label != "fake":
            continue
        x0, y0, x1, y1 = e.artifact_box
        rows = (y0 < m1) and (y1 + 1 > m0)
        cols = (x0 < m1) and (x1 + 1 > m0)
        hit += int(rows and cols)
    assert hit == 0
    assert man.metadata["placement_fallbacks"] == 0


def test_synth_fake_differs_from_real_inside_box(tmp_path):
    # same background generator stream a real image would use is perturbed
    # only where the patch lands, so the artifact must be visible there
    man = synth_dataset(SynthConfig(**SMALL), tmp_path / "d")
    fakes = [e for e in man.entries if e.label == "fake"]
    e = fakes[0]
    img = load_image(e.path).astype(float)
    x0, y0, x1, y1 = e.artifact_box
    inside = img[y0:y1 + 1, x0:x1 + 1, :]
    # the checkerboard flips sign at its block period, so the two-row lag
    # shows strong contrast against the smooth background
    d_row = np.abs(inside[2:] - inside[:-2]).mean()
    outside = np.abs(img[2:] - img[:-2])
    outside[max(y0 - 2, 0):y1 + 1, x0:x1 + 1] = np.nan
    assert d_row > 2 * np.nanmean(outside)
