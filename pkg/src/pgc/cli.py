"""Command line front end.

Settings are layered: built-in defaults, then a JSON config file, then
explicit flags.  The config file comes from --config or the PGC_CONFIG
environment variable and is a flat object mapping option names (argparse
dest form, e.g. "batch_size") to values; keys the invoked subcommand does
not define are rejected.  Commands that produce an output directory write
run_config.json there with every resolved setting, so a run can always be
reproduced from its artifacts.

Exit codes: 0 success, 2 contract violation or bad usage, 3 data or
training failure, 4 verification failure.  Failures print a single JSON
object to stderr: {"error": {"code": ..., "message": ...}}.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .errors import ContractError, DataError, PgcError

_EPILOG = "settings resolve as defaults < config file < explicit flags"


class _Parser(argparse.ArgumentParser):
    # usage problems must surface as exit code 2 with a JSON error line
    def error(self, message):
        raise ContractError(message, code="USAGE")


def _add(sp, suppress):
    def add(*names, **kw):
        if suppress and "default" in kw:
            kw["default"] = argparse.SUPPRESS
        sp.add_argument(*names, **kw)
    return add


def _common(add):
    add("--config", default=None,
        help="JSON config file; PGC_CONFIG is used when the flag is absent")
    add("--backend", default=None, choices=["numba", "numpy"],
        help="numeric kernel backend; default follows PGC_BACKEND or availability")


def _model_flags(add, crop=224, patch=14):
    add("--crop-size", type=int, default=crop, dest="crop_size",
        help=f"square input side, divisible by 8 and the patch size (default {crop})")
    add("--tau", type=float, default=0.5,
        help="peak aggregation temperature (default 0.5; large values approach mean pooling)")
    add("--lambda-init", type=float, default=0.1, dest="lambda_init",
        help="initial weight of the pixel-stream local logit (default 0.1)")
    add("--channels", default="16,32,64",
        help="comma-separated widths of the three residual conv blocks (default 16,32,64)")
    add("--patch-size", type=int, default=patch, dest="patch_size",
        help=f"pixel-stream patch side (default {patch})")
    add("--embed-dim", type=int, default=64, dest="embed_dim",
        help="pixel-stream token width (default 64)")
    add("--res-stream", action=argparse.BooleanOptionalAction, default=True,
        dest="res_stream", help="enable or disable the residual stream")
    add("--rgb-stream", action=argparse.BooleanOptionalAction, default=True,
        dest="rgb_stream", help="enable or disable the pixel stream")
    add("--pgcm", action=argparse.BooleanOptionalAction, default=True,
        help="enable or disable patch scoring and the local peak logit")
    add("--pad-mode", default="zeros", choices=["zeros", "wrap"], dest="pad_mode",
        help="conv padding for the residual encoder (default zeros)")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}
    p = _Parser(prog="pgc", description="peak-guided detector toolkit",
                epilog=_EPILOG, **kw)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sp = sub.add_parser("synth", help="generate a labeled synthetic dataset",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--out", default=None, help="output dataset directory (required)")
    a("--size", type=int, default=224, help="image side in pixels (default 224)")
    a("--count-per-class", type=int, default=1250, dest="count_per_class",
      help="images per class (default 1250)")
    a("--box-size", type=int, default=24, dest="box_size",
      help="artifact box side (default 24)")
    a("--amplitude", type=float, default=15.0,
      help="artifact strength in 0..255 units (default 15)")
    a("--pattern", default="checkerboard", choices=["checkerboard", "sinusoid"],
      help="artifact texture (default checkerboard)")
    a("--marker-strength", type=float, default=1.0, dest="marker_strength",
      help="in-box pull toward the color lattice, 0..1 (default 1)")
    a("--distractor-rate", type=float, default=6e-4, dest="distractor_rate",
      help="expected distractor patches per pixel (default 6e-4)")
    a("--distractor-amplitude", default="3.0,12.0", dest="distractor_amplitude",
      help="distractor strength range lo,hi (default 3.0,12.0)")
    a("--distractor-burst", type=float, default=3.0, dest="distractor_burst",
      help="gamma shape for the per-image distractor load (default 3)")
    a("--smoothness", type=int, default=8,
      help="coarse background cells per side (default 8)")
    a("--field-contrast", type=float, default=60.0, dest="field_contrast",
      help="background field contrast (default 60)")
    a("--noise-sigma", type=float, default=2.0, dest="noise_sigma",
      help="additive gaussian noise sigma (default 2)")
    a("--outside-center-prob", type=float, default=0.8, dest="outside_center_prob",
      help="chance the artifact lands outside the central third (default 0.8)")
    a("--fractions", default="0.8,0.0,0.2",
      help="train,eval,test fractions (default 0.8,0.0,0.2)")
    a("--seed", type=int, default=0, help="generation seed (default 0)")
    sp.set_defaults(func=_run_synth)

    sp = sub.add_parser("prep", help="standardize raw image/frame sources",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--real", default=None, help="directory of real images (required)")
    a("--fake", action="append", default=None, metavar="NAME=DIR",
      help="fake source as name=directory; repeatable (required)")
    a("--out", default=None, help="output dataset directory (required)")
    a("--crop-size", type=int, default=320, dest="crop_size",
      help="center-crop side; smaller images are rejected (default 320)")
    a("--frame-interval", type=int, default=60, dest="frame_interval",
      help="keep every k-th frame of video sources (default 60)")
    a("--short-interval", type=int, default=30, dest="short_interval",
      help="interval for sources named in --short-sources (default 30)")
    a("--short-sources", default="", dest="short_sources",
      help="comma-separated source names using the short interval")
    a("--fractions", default="0.8,0.1,0.1",
      help="train,eval,test fractions (default 0.8,0.1,0.1)")
    a("--seed", type=int, default=0, help="subsample/split seed (default 0)")
    sp.set_defaults(func=_run_prep)

    sp = sub.add_parser("train", help="train a detector on a manifest",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--manifest", default=None, help="dataset manifest JSON (required)")
    a("--out", default=None, help="run directory for checkpoint and history (required)")
    _model_flags(a)
    a("--batch-size", type=int, default=32, dest="batch_size",
      help="minibatch size (default 32)")
    a("--lr", type=float, default=5e-5, help="learning rate (default 5e-5)")
    a("--epochs", type=int, default=5, help="training epochs (default 5)")
    a("--weight-decay", type=float, default=0.01, dest="weight_decay",
      help="decoupled weight decay (default 0.01)")
    a("--seed", type=int, default=0, help="init and shuffle seed (default 0)")
    sp.set_defaults(func=_run_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--manifest", default=None, help="dataset manifest JSON (required)")
    a("--checkpoint", default=None, help="trained checkpoint (required)")
    a("--split", default="test", help="manifest split to score (default test)")
    a("--batch-size", type=int, default=32, dest="batch_size",
      help="scoring batch size (default 32)")
    a("--out", default=None, help="optional directory for report.json")
    sp.set_defaults(func=_run_eval)

    sp = sub.add_parser("perturb", help="write perturbed copies of a dataset",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--manifest", default=None, help="dataset manifest JSON (required)")
    a("--out", default=None, help="output tree root (required)")
    a("--families", default="all",
      help="comma-separated family names, or 'all' for the swept twelve")
    a("--levels", default="1,2,3,4,5",
      help="comma-separated grid levels 1..5 (default all five)")
    a("--split", default=None, help="restrict to one manifest split")
    a("--limit", type=int, default=None, help="use only the first N entries")
    a("--seed", type=int, default=0, help="noise seed (default 0)")
    sp.set_defaults(func=_run_perturb)

    sp = sub.add_parser("robust", help="score a checkpoint over a perturbation tree",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--checkpoint", default=None, help="trained checkpoint (required)")
    a("--tree", default=None, help="perturbation tree root (required)")
    a("--out", default=None, help="optional CSV path for the accuracy table")
    a("--split", default=None, help="restrict to one manifest split")
    a("--batch-size", type=int, default=32, dest="batch_size",
      help="scoring batch size (default 32)")
    sp.set_defaults(func=_run_robust)

    sp = sub.add_parser("gradcheck", help="verify analytic gradients numerically",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--size", type=int, default=32, dest="crop_size",
      help="square input side for the check (default 32)")
    a("--tau", type=float, default=0.5,
      help="peak aggregation temperature (default 0.5)")
    a("--lambda-init", type=float, default=0.1, dest="lambda_init",
      help="initial weight of the pixel-stream local logit (default 0.1)")
    a("--channels", default="16,32,64",
      help="comma-separated widths of the three residual conv blocks (default 16,32,64)")
    a("--patch-size", type=int, default=8, dest="patch_size",
      help="pixel-stream patch side; must divide --size (default 8)")
    a("--embed-dim", type=int, default=64, dest="embed_dim",
      help="pixel-stream token width (default 64)")
    a("--res-stream", action=argparse.BooleanOptionalAction, default=True,
      dest="res_stream", help="enable or disable the residual stream")
    a("--rgb-stream", action=argparse.BooleanOptionalAction, default=True,
      dest="rgb_stream", help="enable or disable the pixel stream")
    a("--pgcm", action=argparse.BooleanOptionalAction, default=True,
      help="enable or disable patch scoring and the local peak logit")
    a("--pad-mode", default="zeros", choices=["zeros", "wrap"], dest="pad_mode",
      help="conv padding for the residual encoder (default zeros)")
    a("--seed", type=int, default=7, help="random image and init seed (default 7)")
    a("--label", type=int, default=1, choices=[0, 1],
      help="target label for the checked loss (default 1)")
    a("--step", type=float, default=1e-5,
      help="central difference step (default 1e-5)")
    a("--tol", type=float, default=1e-4,
      help="max relative error allowed (default 1e-4)")
    sp.set_defaults(func=_run_gradcheck)

    sp = sub.add_parser("peaks", help="score one image and print its peak boxes",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--image", default=None, help="input image path (required)")
    a("--checkpoint", default=None, help="trained checkpoint (required)")
    a("--k", type=int, default=3, help="peaks per stream (default 3)")
    sp.set_defaults(func=_run_peaks)

    sp = sub.add_parser("residual-vis", help="write a residual map as 16-bit PNG",
                        epilog=_EPILOG, **kw)
    a = _add(sp, suppress)
    _common(a)
    a("--image", default=None, help="input image path (required)")
    a("--out", default=None, help="output 16-bit PNG path (required)")
    sp.set_defaults(func=_run_residual_vis)

    return p


# ------------------------------------------------------------ value parsing ----

def _floats(v, n: int, what: str) -> tuple:
    parts = v.split(",") if isinstance(v, str) else list(v)
    out = tuple(float(x) for x in parts)
    if len(out) != n:
        raise ContractError(f"{what} needs {n} comma-separated values, got {v!r}")
    return out


def _ints(v) -> tuple:
    parts = v.split(",") if isinstance(v, str) else list(v)
    return tuple(int(x) for x in parts)


def _fake_pairs(v) -> list:
    if v is None:
        raise ContractError("at least one --fake NAME=DIR is required",
                            code="MISSING_ARG")
    pairs = []
    for item in v:
        if isinstance(item, (list, tuple)) and len(item) == 2:
            pairs.append((str(item[0]), str(item[1])))
            continue
        name, sep, d = str(item).partition("=")
        if not sep or not name or not d:
            raise ContractError(f"--fake expects NAME=DIR, got {item!r}")
        pairs.append((name, d))
    return pairs


def _require(ns, *names):
    for n in names:
        if getattr(ns, n, None) is None:
            raise ContractError(f"--{n.replace('_', '-')} is required",
                                code="MISSING_ARG")


def _model_cfg(ns):
    from .model import ModelConfig

    return ModelConfig(
        crop=ns.crop_size, tau=ns.tau, lambda_init=ns.lambda_init,
        channels=_ints(ns.channels), patch_size=ns.patch_size,
        embed_dim=ns.embed_dim, res_stream=ns.res_stream,
        rgb_stream=ns.rgb_stream, pgcm=ns.pgcm, pad_mode=ns.pad_mode)


def _load_checkpoint(path):
    from .model import model_config_from_dict
    from .params import load_checkpoint

    _require(SimpleNamespace(checkpoint=path), "checkpoint")
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ContractError(f"checkpoint {path} has no model config in metadata",
                            code="BAD_CHECKPOINT")
    return params, model_config_from_dict(meta["model"]), meta


def _snapshot(resolved: dict, out_dir) -> None:
    doc = {k: v for k, v in resolved.items() if k != "func"}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# -------------------------------------------------------------- subcommands ----

def _run_synth(ns, resolved):
    from .data import SynthConfig, synth_dataset

    _require(ns, "out")
    cfg = SynthConfig(
        size=ns.size, count_per_class=ns.count_per_class, box_size=ns.box_size,
        amplitude=ns.amplitude, pattern=ns.pattern,
        marker_strength=ns.marker_strength,
        distractor_rate=ns.distractor_rate,
        distractor_amplitude=tuple(_floats(ns.distractor_amplitude, 2,
                                           "distractor-amplitude")),
        distractor_burst=ns.distractor_burst, smoothness=ns.smoothness,
        field_contrast=ns.field_contrast, noise_sigma=ns.noise_sigma,
        outside_center_prob=ns.outside_center_prob,
        fractions=_floats(ns.fractions, 3, "fractions"), seed=ns.seed)
    _snapshot(resolved, ns.out)
    man = synth_dataset(cfg, ns.out)
    print(f"wrote {len(man.entries)} images under {ns.out}")
    print(json.dumps(man.counts(), sort_keys=True))


def _run_prep(ns, resolved):
    from .data import SamplingPolicy, prep_dataset

    _require(ns, "real", "out")
    policy = SamplingPolicy(
        default_interval=ns.frame_interval, short_interval=ns.short_interval,
        short_sources=frozenset(s for s in ns.short_sources.split(",") if s))
    _snapshot(resolved, ns.out)
    man = prep_dataset(ns.real, _fake_pairs(ns.fake), ns.out,
                       crop_size=ns.crop_size, policy=policy,
                       fractions=_floats(ns.fractions, 3, "fractions"),
                       seed=ns.seed)
    rejected = man.metadata.get("rejected", [])
    print(f"manifest: {Path(ns.out) / 'manifest.json'}")
    print(json.dumps(man.counts(), sort_keys=True))
    if rejected:
        print(f"rejected {len(rejected)} undersized images (see manifest metadata)")


def _run_train(ns, resolved):
    from .data import Manifest
    from .params import load_checkpoint
    from .train import TrainConfig, train

    _require(ns, "manifest", "out")
    man = Manifest.load(ns.manifest)
    cfg = TrainConfig(model=_model_cfg(ns), batch_size=ns.batch_size, lr=ns.lr,
                      epochs=ns.epochs, seed=ns.seed,
                      weight_decay=ns.weight_decay)
    _snapshot(resolved, ns.out)
    train(man, cfg, out_dir=ns.out, log=print)
    _, meta = load_checkpoint(Path(ns.out) / "best.pgck")
    print(f"best epoch {meta['best_epoch']} "
          f"({meta['eval_split_used']} acc {meta['best_acc']:.4f}) "
          f"-> {Path(ns.out) / 'best.pgck'}")


def _run_eval(ns, resolved):
    from .data import Manifest
    from .metrics import evaluate

    _require(ns, "manifest", "checkpoint")
    params, cfg, _ = _load_checkpoint(ns.checkpoint)
    man = Manifest.load(ns.manifest)
    report, loc = evaluate(params, man, cfg, split=ns.split,
                           batch_size=ns.batch_size,
                           warn=lambda m: print(m, file=sys.stderr))
    print(report.table())
    if loc is not None:
        print(f"localization on {loc.n_true_positive} true-positive fakes: "
              f"res {loc.frac_res:.3f}  rgb {loc.frac_rgb:.3f}  "
              f"either {loc.frac_either:.3f}")
    if ns.out:
        _snapshot(resolved, ns.out)
        out = Path(ns.out)
        with open(out / "report.json", "w") as f:
            f.write(report.to_json() + "\n")
        if loc is not None:
            with open(out / "localization.json", "w") as f:
                json.dump(loc.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        print(f"report: {out / 'report.json'}")


def _run_perturb(ns, resolved):
    from .data import Manifest
    from .perturb import SWEEP_FAMILIES, sweep

    _require(ns, "manifest", "out")
    fams = SWEEP_FAMILIES if ns.families == "all" \
        else tuple(s for s in ns.families.split(",") if s)
    man = Manifest.load(ns.manifest)
    _snapshot(resolved, ns.out)
    rows = sweep(man, ns.out, families=fams, levels=_ints(ns.levels),
                 seed=ns.seed, split=ns.split, limit=ns.limit, log=None)
    for family, level, count, tree_hash in rows:
        print(f"{family:>14} level {level}: {count} files  {tree_hash}")
    print(f"summary: {Path(ns.out) / 'summary.csv'}")


def _run_robust(ns, resolved):
    from .metrics import robust_eval, write_robust_csv

    _require(ns, "checkpoint", "tree")
    params, cfg, _ = _load_checkpoint(ns.checkpoint)
    rows = robust_eval(params, ns.tree, cfg, batch_size=ns.batch_size,
                       split=ns.split)
    for family, level, n, acc in rows:
        print(f"{family:>14} level {level}: acc {acc:.4f} on {n}")
    if ns.out:
        write_robust_csv(rows, ns.out)
        print(f"table: {ns.out}")


def _run_gradcheck(ns, resolved):
    from .errors import VerificationError
    from .model import gradcheck_model, init_params

    cfg = _model_cfg(ns)
    rng = np.random.default_rng(ns.seed)
    image = rng.integers(0, 256, size=(cfg.crop, cfg.crop, 3)).astype(np.float64)
    params = init_params(cfg, seed=ns.seed)
    report = gradcheck_model(image, ns.label, params, cfg, step=ns.step)
    print(report.summary())
    if not report.passed(ns.tol):
        w = report.worst()
        raise VerificationError(
            f"gradient check failed: {w.name}[{w.worst_index}] rel err "
            f"{w.max_rel_err:.3e} > {ns.tol:g}", code="GRADCHECK_FAILED")
    print(f"PASS (tol {ns.tol:g})")


def _run_peaks(ns, resolved):
    from .data import load_image
    from .model import predict

    _require(ns, "image", "checkpoint")
    params, cfg, _ = _load_checkpoint(ns.checkpoint)
    img = load_image(ns.image)
    prob, peaksets = predict(img, params, cfg, k=ns.k, image_id=str(ns.image))
    doc = {"image": str(ns.image), "prob": prob, "label": int(prob > 0.5),
           "streams": [json.loads(ps.to_json()) for ps in peaksets]}
    print(json.dumps(doc, sort_keys=True))


def _run_residual_vis(ns, resolved):
    from .data import load_image
    from .residual import RESIDUAL_BOUND, compute_residual, write_residual_png

    _require(ns, "image", "out")
    res = compute_residual(load_image(ns.image).astype(np.float64))
    write_residual_png(ns.out, res)
    print(json.dumps({
        "out": str(ns.out),
        "max_abs": float(np.abs(res).max()),
        "mean_abs": float(np.abs(res).mean()),
        "scale_bound": float(RESIDUAL_BOUND)}, sort_keys=True))


# --------------------------------------------------------------------- main ----

def _resolve(argv) -> dict:
    full = vars(build_parser(False).parse_args(argv))
    given = vars(build_parser(True).parse_args(argv))
    cfg_path = given.get("config") or os.environ.get("PGC_CONFIG")
    resolved = dict(full)
    if cfg_path:
        try:
            with open(cfg_path) as f:
                file_cfg = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read config {cfg_path}: {exc}",
                            code="MISSING_CONFIG") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"config {cfg_path} is not valid JSON: {exc}",
                                code="BAD_CONFIG") from exc
        if not isinstance(file_cfg, dict):
            raise ContractError(f"config {cfg_path} must be a JSON object",
                                code="BAD_CONFIG")
        for k, v in file_cfg.items():
            if k in ("command", "func") or k not in resolved:
                raise ContractError(
                    f"config key {k!r} is not a setting of '{resolved['command']}'",
                    code="BAD_CONFIG")
            resolved[k] = v
    resolved.update((k, v) for k, v in given.items() if k != "func")
    return resolved


def main(argv=None) -> int:
    try:
        resolved = _resolve(argv if argv is not None else sys.argv[1:])
        if resolved.get("backend"):
            from .backend import set_backend
            set_backend(resolved["backend"])
        func = resolved["func"]
        ns = SimpleNamespace(**{k: v for k, v in resolved.items() if k != "func"})
        func(ns, {k: v for k, v in resolved.items() if k != "func"})
        return 0
    except PgcError as e:
        print(json.dumps({"error": {"code": e.code, "message": str(e)}}),
              file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001 - CLI boundary, keep stderr machine readable
        print(json.dumps({"error": {"code": "INTERNAL",
                                    "message": f"{type(e).__name__}: {e}"}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
