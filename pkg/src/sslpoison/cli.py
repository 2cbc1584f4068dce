"""Command-line entry point: ``sslpoison <verb> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 bad usage or config, 3 a pipeline stage failed.
Diagnostics go to stderr as ``sslpoison <verb>: stage <name>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import defense, experiment, imageops, platform, saliency
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e


def _config(args, **overrides) -> experiment.ExperimentConfig:
    d = experiment.read_structured(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "attack", None):
        d["attack"] = args.attack
    d.update(overrides)
    return experiment.ExperimentConfig.from_dict(d)


def _out(args, default):
    return Path(args.out) if args.out else Path(default)


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


# ---------------------------------------------------------------------- verbs

def cmd_craft(args):
    cfg = _config(args)
    if cfg.attack not in experiment.PATTERN_ATTACKS:
        raise ConfigError(f"craft builds pattern attacks ({', '.join(experiment.PATTERN_ATTACKS)}), got {cfg.attack!r}")
    return _write_attack(args, cfg, "craft")


def cmd_attack(args):
    cfg = _config(args)
    if cfg.attack == "none":
        raise ConfigError("attack needs an attack id (--attack or 'attack:' in the config)")
    return _write_attack(args, cfg, "attack")


def _write_attack(args, cfg, verb):
    out = _out(args, f"out/{verb}-{cfg.hash()}")
    bundle = _stage("load", experiment.prepare_data, cfg)
    guesses = None
    if cfg.attack in experiment.NEEDS_GUESSES:
        guesses = _stage("guess", experiment.guess_set_for, cfg, bundle)
    before = bundle.unlabeled
    attacked, manifest = _stage("attack", experiment.apply_attack, cfg, bundle, guesses)
    mask = experiment.poisoned_mask(before, attacked.unlabeled)
    out.mkdir(parents=True, exist_ok=True)
    for i in np.flatnonzero(mask):
        imageops.save_png(attacked.unlabeled.images[i], out / "poisoned" / f"{attacked.unlabeled.ids[i]}.png")
    if manifest is not None:
        manifest.write(out / "manifest.csv")
    if guesses is not None:
        with open(out / "guess_set.csv", "w") as f:
            f.write("id,label\n")
            for sid, lab in zip(guesses.samples.ids, guesses.samples.labels):
                f.write(f"{sid},{int(lab)}\n")
    (out / "unlabeled_ids.txt").write_text("\n".join(attacked.unlabeled.ids.tolist()) + "\n")
    (out / "config.json").write_text(cfg.to_json())
    _print({"out": str(out), "attack": cfg.attack, "n_unlabeled": len(attacked.unlabeled),
            "n_poisoned": int(mask.sum())})
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args, **({"out_dir": args.out} if args.out else {}))
    rec = experiment.run_experiment(cfg, force=args.force)
    _print({"run_dir": str(cfg.run_dir()), **json.loads(rec.to_json())})
    if not rec.ok:
        raise StageError(rec.stage, rec.error)
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate, load_checkpoint

    cfg = _config(args)
    model, spec = _stage("load", load_checkpoint, args.model)
    bundle = _stage("load", experiment.prepare_data, cfg)
    result = {"model": args.model, "acc_test": _stage("evaluate", evaluate, model, bundle.test)}
    for k in cfg.topk:
        result[f"top{k}"] = _stage("evaluate", evaluate, model, bundle.test, k)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(result, indent=1))
    _print(result)
    return EXIT_OK


def cmd_detect(args):
    if args.method == "kdensity":
        cfg = _config(args, **({"out_dir": args.out} if args.out else {}))
        if cfg.defense is None:
            cfg.defense = dict(experiment.DEFENSE_DEFAULTS)
        rec = experiment.run_experiment(cfg)
        if not rec.ok:
            raise StageError(rec.stage, rec.error)
        _print({"run_dir": str(cfg.run_dir()), "defense": rec.defense})
        return EXIT_OK
    return _detect_classifier(args)


def _detect_classifier(args):
    """Train on the train-pool poisons, test on poisons crafted from the test split."""
    cfg = _config(args)
    if cfg.attack not in experiment.PATTERN_ATTACKS:
        raise ConfigError("classifier detection needs a pattern attack in the config")
    out = _out(args, f"out/detect-{cfg.hash()}")
    bundle = _stage("load", experiment.prepare_data, cfg)
    guesses = _stage("guess", experiment.guess_set_for, cfg, bundle)
    before = bundle.unlabeled
    attacked, _ = _stage("attack", experiment.apply_attack, cfg, bundle, guesses)
    mask = experiment.poisoned_mask(before, attacked.unlabeled)
    det = _stage("train", defense.train_detector, attacked.unlabeled.images[~mask],
                 attacked.unlabeled.images[mask], None, cfg.seed)
    # held-out domain: the test split, poisoned with the same guesses
    from .data import SealedLabels, Split

    test = bundle.test
    labels = test.labels if test.labels is not None else test.hidden.reveal("evaluation")
    held = bundle.with_unlabeled(Split(test.images, test.ids, None, SealedLabels(labels)))
    held_attacked, _ = _stage("attack", experiment.apply_attack, cfg, held, guesses)
    hmask = experiment.poisoned_mask(held.unlabeled, held_attacked.unlabeled)
    metrics = _stage("evaluate", det.evaluate, held_attacked.unlabeled.images[~hmask],
                     held_attacked.unlabeled.images[hmask])
    probs = det.poison_probability(held_attacked.unlabeled.images)
    defense.write_scores_csv(out / "verdicts.csv", held_attacked.unlabeled.ids, probs, probs > 0.5)
    (out / "metrics.json").write_text(json.dumps(metrics.as_dict(), indent=1))
    _print({"out": str(out), **metrics.as_dict()})
    return EXIT_OK


def cmd_pipeline(args):
    profile = _stage("load", platform.get_profile, args.profile)
    src = Path(args.input)
    out = _out(args, "out/pipeline")
    if args.stage == "export":
        files = sorted(src.glob("*.png"))
        if not files:
            raise StageError("load", f"no PNG images in {src}")
        images = np.stack([imageops.load_png(f) for f in files])
        sidecar = _stage("stack", platform.export_canvases, images, profile, out, [f.stem for f in files])
        _print({"sidecar": str(sidecar), "images": len(files)})
    elif args.stage == "upload":
        sidecar = _stage("upload", platform.simulate_upload_dir, src, profile, out)
        _print({"sidecar": str(sidecar)})
    elif args.stage == "import":
        images, ids = _stage("unstack", platform.import_canvases, src / "layout.json")
        for img, sid in zip(images, ids):
            imageops.save_png(img, out / f"{sid}.png")
        _print({"out": str(out), "images": len(ids)})
    else:
        files = sorted(src.glob("*.png"))
        if not files:
            raise StageError("load", f"no PNG images in {src}")
        images = np.stack([imageops.load_png(f) for f in files])
        result = _stage("roundtrip", platform.platform_roundtrip, images, profile)
        for img, f in zip(result, files):
            imageops.save_png(img, out / f.name)
        _print({"out": str(out), "images": len(files), "max_abs_diff": float(np.abs(result - images).max())})
    return EXIT_OK


def cmd_sweep(args):
    if not args.config:
        raise ConfigError("sweep needs --config pointing at a sweep file")
    configs, keys, par = experiment.load_sweep(args.config)
    for c in configs:
        if args.seed is not None:
            c.seed = args.seed
        if args.out:
            c.out_dir = args.out
    out = Path(configs[0].out_dir)
    records = experiment.sweep(configs, args.parallel or par, out / "results.csv", keys)
    failed = [r for r in records if not r.ok]
    _print({"results": str(out / "results.csv"), "cells": len(records), "failed": len(failed)})
    for r in failed:
        print(f"cell {r.config_hash}: stage {r.stage}: {r.error}", file=sys.stderr)
    return EXIT_STAGE if failed else EXIT_OK


def cmd_report(args):
    runs = Path(args.runs)
    if args.config:
        configs, _, _ = experiment.load_sweep(args.config)
        records = [experiment.ResultRecord.read(c.run_dir() / "result.json")
                   for c in configs if (c.run_dir() / "result.json").exists()]
    else:
        records = experiment.collect_records(runs)
    files = _stage("report", experiment.emit_report, records, _out(args, "report"), args.format)
    _print({"records": len(records), "files": [str(f) for f in files]})
    return EXIT_OK


def cmd_gradcam(args):
    from .train import load_checkpoint

    model, _ = _stage("load", load_checkpoint, args.model)
    image = _stage("load", imageops.load_png, args.image)
    cam = _stage("gradcam", saliency.gradcam, model, image, args.layer)
    out = _out(args, "gradcam.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out.with_suffix(".npy"), cam)
    imageops.save_png(cam[:, :, None], out)
    _print({"out": str(out), "right_half_share": saliency.attention_share(cam, slice(cam.shape[1] // 2, None))})
    return EXIT_OK


VERBS = {
    "craft": (cmd_craft, "craft pattern-poisoned samples and their manifest"),
    "attack": (cmd_attack, "apply any attack id to the unlabeled set"),
    "train": (cmd_train, "run the full pipeline for one config"),
    "run": (cmd_train, "alias of train"),
    "eval": (cmd_eval, "evaluate a checkpoint on the config's test split"),
    "detect": (cmd_detect, "score poisons with K-density or a detector classifier"),
    "pipeline": (cmd_pipeline, "emulate platform upload/download on PNG files"),
    "sweep": (cmd_sweep, "run a grid of configs (resumable)"),
    "report": (cmd_report, "tables and PDR/PV curves from finished runs"),
    "gradcam": (cmd_gradcam, "saliency map of a checkpoint on one image"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sslpoison", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (fn, help_) in VERBS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML/JSON experiment (or sweep) file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(fn=fn)
        if name in ("craft", "attack", "detect"):
            p.add_argument("--attack", choices=experiment.ATTACKS)
        if name in ("train", "run"):
            p.add_argument("--force", action="store_true", help="rerun even if a finished run exists")
        if name == "eval":
            p.add_argument("--model", required=True)
        if name == "detect":
            p.add_argument("--method", choices=("kdensity", "classifier"), default="kdensity")
        if name == "pipeline":
            p.add_argument("--stage", choices=("export", "upload", "import", "roundtrip"), default="roundtrip")
            p.add_argument("--input", required=True, help="directory of PNGs (or canvases with layout.json)")
            p.add_argument("--profile", default="instagram")
        if name == "sweep":
            p.add_argument("--parallel", type=int)
        if name == "report":
            p.add_argument("--runs", default="runs")
            p.add_argument("--format", choices=("csv", "png", "both"), default="both")
        if name == "gradcam":
            p.add_argument("--model", required=True)
            p.add_argument("--image", required=True)
            p.add_argument("--layer", default="last")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"sslpoison {args.verb}: stage config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"sslpoison {args.verb}: stage {e.stage}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
