"""Experiment configs, single runs, sweeps and reports.

A run lives in ``<out_dir>/<hash>/`` where the hash is taken over the
canonical JSON form of the resolved config (output location excluded)::

    config.json  trace.csv  result.json  manifest.csv  model.pt
    scores.csv  histograms.csv  images/
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import tempfile
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import augment, baselines, data, defense, platform
from .data import CIFAR10_SUPERCLASSES, DatasetBundle, Split, concat_splits
from .errors import ConfigError, TrainingError
from .models import ModelSpec
from .poison import PoisonConfig, PoisonManifest, build_guess_set, poison_unlabeled
from .ssl import SSLConfig
from .train import Schedule, predict_logits, save_checkpoint, topk_accuracy, train

log = logging.getLogger(__name__)

ATTACKS = ("none", "empty", "remove", "interp", "warp", "fgsm", "phantom", "two-unlabeled", "3u1l")
PATTERN_ATTACKS = ("phantom", "two-unlabeled", "3u1l")
GROUPINGS = {"cifar10-superclasses": CIFAR10_SUPERCLASSES}

ATTACK_DEFAULTS = {
    "none": {},
    "empty": {"pdr": 0.1},
    "remove": {"pdr": 0.1},
    "interp": {"pdr": 0.1, "density": "one_point_five_minus_x"},
    "warp": {"pdr": 0.1, "strength": 0.5, "grid_size": 4},
    "fgsm": {"pdr": 0.1, "epsilon": 0.03},
    "phantom": {"pdr": 0.05, "pv": 0.1, "pattern_arity": 2, "distinct_label_policy": True,
                "crop_mode": "center", "crop_offsets": None},
    "two-unlabeled": {"pdr": 0.05, "pv": 0.1, "pattern_arity": 2, "distinct_label_policy": True,
                      "crop_mode": "center", "crop_offsets": None},
    "3u1l": {"pdr": 0.05, "pv": 0.1, "pattern_arity": 4, "distinct_label_policy": True,
             "crop_mode": "center", "crop_offsets": None},
}
NEEDS_GUESSES = ("phantom", "3u1l", "interp", "fgsm")
DEFENSE_DEFAULTS = {"kdensity": True, "warmup_epochs": 10, "target_fpr": 0.05, "bandwidth": None}


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str = "data/mnist5k"
    labeled: int = 10
    seed: int = 0
    grouping: str | None = None
    attack: str = "none"
    attack_params: dict = field(default_factory=dict)
    guess: dict = field(default_factory=lambda: {"precision": 1.0, "sensitivity": 1.0})
    ssl: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"backbone": "small-cnn", "width": 16})
    augment: dict = field(default_factory=dict)
    corruption: dict | None = None
    defense: dict | None = None
    platform: str | None = None
    platform_scope: str = "poisoned"
    topk: list = field(default_factory=lambda: [1])
    save_images: int = 16
    out_dir: str = "runs"

    # ---------------------------------------------------------------- parsing
    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.resolve()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_structured(path))

    def resolve(self):
        """Fill defaults and validate every referenced id."""
        if self.dataset not in data.LOADERS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {sorted(data.LOADERS)}")
        if self.grouping is not None and self.grouping not in GROUPINGS:
            raise ConfigError(f"unknown grouping {self.grouping!r}; choose from {sorted(GROUPINGS)}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}; choose from {', '.join(ATTACKS)}")
        params = {**ATTACK_DEFAULTS[self.attack], **(self.attack_params or {})}
        bad = sorted(set(params) - set(ATTACK_DEFAULTS[self.attack]))
        if bad:
            raise ConfigError(f"attack {self.attack!r} takes no parameter(s) {', '.join(bad)}")
        if "pdr" in params and not 0.0 <= params["pdr"] <= 1.0:
            raise ConfigError(f"pdr must lie in [0, 1], got {params['pdr']}")
        if self.attack == "interp" and params["density"] not in baselines.DENSITIES:
            raise ConfigError(f"unknown density {params['density']!r}; choose from {sorted(baselines.DENSITIES)}")
        if params.get("crop_offsets") is not None:
            params["crop_offsets"] = [list(o) for o in params["crop_offsets"]]
        self.attack_params = params
        self.guess = {"precision": 1.0, "sensitivity": 1.0, **(self.guess or {})}
        try:
            self.ssl = asdict(SSLConfig(**(self.ssl or {})))
            sched = Schedule(**{**(self.schedule or {}), "seed": self.seed})
        except (TypeError, ValueError, NotImplementedError) as e:
            raise ConfigError(f"bad ssl/schedule section: {e}") from e
        self.schedule = {k: v for k, v in asdict(sched).items() if k != "seed"}
        self.model = {"backbone": "small-cnn", "width": 16, **(self.model or {})}
        self.augment = {"strong_ops": list(augment.STRONG_OPS), "num_ops": 2, **(self.augment or {})}
        try:
            augment.AugmentPolicy(kind="strong", ops=tuple(self.augment["strong_ops"]))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.corruption is not None:
            c = {"params": {}, "splits": ["labeled", "unlabeled"], **self.corruption}
            if c.get("kind") not in augment.CORRUPTIONS:
                raise ConfigError(f"unknown corruption {c.get('kind')!r}; choose from {augment.CORRUPTIONS}")
            self.corruption = c
        if self.defense is not None:
            self.defense = {**DEFENSE_DEFAULTS, **self.defense}
        if self.platform is not None and self.platform not in platform.PROFILES:
            raise ConfigError(f"unknown platform profile {self.platform!r}; choose from {sorted(platform.PROFILES)}")
        if self.platform_scope not in ("poisoned", "all"):
            raise ConfigError("platform_scope must be 'poisoned' or 'all'")
        self.topk = sorted({int(k) for k in (self.topk or [1])} | {1})
        return self

    # ---------------------------------------------------------------- hashing
    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        return json.loads(json.dumps(d, sort_keys=True))

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.hash()

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def read_structured(path) -> dict:
    """YAML or JSON file -> dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return d


@dataclass(frozen=True)
class ResultRecord:
    config_hash: str
    status: str                       # ok | failed
    stage: str | None                 # failing stage
    error: str | None
    seed: int
    acc_test: float | None            # final top-1 test accuracy
    acc_topk: dict
    naive_acc: float | None
    n_unlabeled: int | None
    n_poisoned: int | None
    wall_clock: float
    trace: str | None
    manifest: str | None
    defense: dict | None
    config: dict

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    @property
    def ok(self):
        return self.status == "ok"


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def naive_accuracy(labels) -> float:
    """Accuracy of always predicting the most frequent test class."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.bincount(labels).max() / len(labels))


# ------------------------------------------------------------------ pipeline

def prepare_data(cfg: ExperimentConfig) -> DatasetBundle:
    bundle = data.load_dataset(cfg.dataset, cfg.data_root)
    if cfg.grouping:
        bundle = data.map_labels(bundle, GROUPINGS[cfg.grouping])
    return data.select_labeled(bundle, cfg.labeled, cfg.seed)


def guess_set_for(cfg: ExperimentConfig, bundle: DatasetBundle):
    return build_guess_set(bundle.labeled, bundle.unlabeled, cfg.guess["precision"],
                           cfg.guess["sensitivity"], cfg.seed)


def apply_attack(cfg: ExperimentConfig, bundle: DatasetBundle, guesses=None):
    """Returns (attacked bundle, PoisonManifest or None)."""
    p, a, seed = cfg.attack_params, cfg.attack, cfg.seed
    if a == "none":
        return bundle, None
    if a in PATTERN_ATTACKS:
        pc = PoisonConfig(pv=p["pv"], pdr=p["pdr"], pattern_arity=p["pattern_arity"],
                          distinct_label_policy=p["distinct_label_policy"], crop_mode=p["crop_mode"],
                          crop_offsets=None if p["crop_offsets"] is None else tuple(map(tuple, p["crop_offsets"])),
                          variant=a, seed=seed)
        if guesses is None:
            # the two-unlabeled variant draws no guesses; any labeled split satisfies the type
            guesses = guess_set_for(cfg, bundle)
        return poison_unlabeled(bundle, guesses, pc)
    if p["pdr"] == 0:
        return bundle, None
    if a == "empty":
        return baselines.attack_empty(bundle, p["pdr"], seed), None
    if a == "remove":
        return baselines.attack_remove(bundle, p["pdr"], seed), None
    if a == "interp":
        return baselines.attack_interpolate(bundle, p["pdr"], p["density"], seed, guesses.samples), None
    if a == "warp":
        return baselines.attack_warp(bundle, p["pdr"], p["strength"], p["grid_size"], seed), None
    if a == "fgsm":
        return baselines.attack_fgsm(bundle, p["pdr"], p["epsilon"], None, seed, guesses.samples), None
    raise ConfigError(f"unknown attack {a!r}")


def poisoned_mask(before: Split, after: Split):
    original = set(before.ids.tolist())
    return np.array([sid not in original for sid in after.ids.tolist()], dtype=bool)


def _replace_images(split: Split, idx, new_images):
    images = np.array(split.images)
    images[idx] = new_images
    return Split(images, split.ids, split.labels, split.hidden)


def apply_platform(cfg, bundle, mask):
    idx = np.flatnonzero(mask) if cfg.platform_scope == "poisoned" else np.arange(len(bundle.unlabeled))
    if len(idx) == 0:
        return bundle
    out = platform.platform_roundtrip(bundle.unlabeled.images[idx], cfg.platform)
    return bundle.with_unlabeled(_replace_images(bundle.unlabeled, idx, out))


def apply_corruption(cfg, bundle):
    c = cfg.corruption
    parts = {}
    for i, name in enumerate(("labeled", "unlabeled", "test")):
        split = getattr(bundle, name)
        if name in c["splits"] and len(split):
            imgs = augment.corrupt_batch(split.images, c["kind"], c["params"], seed=[cfg.seed, i])
            split = Split(imgs, split.ids, split.labels, split.hidden)
        parts[name] = split
    return DatasetBundle(parts["labeled"], parts["unlabeled"], parts["test"], bundle.label_space, bundle.name)


def policies_for(cfg):
    weak = augment.AugmentPolicy(kind="weak")
    strong = augment.AugmentPolicy(kind="strong", ops=tuple(cfg.augment["strong_ops"]),
                                   ranges=dict(augment.STRONG_RANGES), num_ops=cfg.augment["num_ops"])
    return weak, strong


def score_poisons(model, bundle: DatasetBundle, mask, dcfg, run_dir: Path | None):
    """K-density of benign vs poisoned unlabeled samples under ``model``."""
    if not mask.any() or mask.all():
        return {"auc": None, "note": "needs both benign and poisoned unlabeled samples"}
    train_images = np.concatenate([bundle.labeled.images, bundle.unlabeled.images])
    refs = defense.build_references(model, train_images)
    bw = dcfg["bandwidth"] or defense.median_bandwidth(refs)
    scores = defense.kdensity_scores(model, bundle.unlabeled.images, refs, bw)
    b, p = scores[~mask], scores[mask]
    thr, metrics, hist = defense.threshold_test(b, p, dcfg["target_fpr"])
    out = {"auc": defense.separability_auc(b, p), "bandwidth": bw, "threshold": thr,
           "metrics": metrics.as_dict(), "mean_benign": float(b.mean()), "mean_poison": float(p.mean())}
    if run_dir is not None:
        defense.write_scores_csv(run_dir / "scores.csv", bundle.unlabeled.ids, scores, scores < thr)
        defense.write_histograms_csv(run_dir / "histograms.csv", hist)
    return out


def _save_examples(run_dir, split, mask, n):
    from .imageops import save_png
    for i in np.flatnonzero(mask)[:n]:
        save_png(split.images[i], run_dir / "images" / f"{split.ids[i]}.png")


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> ResultRecord:
    """Run (or reuse) one experiment. Stage errors are recorded, not raised."""
    cfg = copy.deepcopy(cfg).resolve()
    run_dir = cfg.run_dir()
    done = run_dir / "result.json"
    if done.exists() and not force:
        rec = ResultRecord.read(done)
        if rec.ok:
            return rec
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    t0 = time.time()
    state = {"stage": "load", "trace": None, "manifest": None, "n_u": None, "n_p": None,
             "naive": None, "acc": None, "topk": {}, "defense": None}

    def stage(name):
        state["stage"] = name
        log.info("[%s] stage %s", run_dir.name, name)

    try:
        stage("load")
        bundle = prepare_data(cfg)
        stage("guess")
        guesses = guess_set_for(cfg, bundle) if cfg.attack in NEEDS_GUESSES else None
        stage("attack")
        before = bundle.unlabeled
        bundle, manifest = apply_attack(cfg, bundle, guesses)
        mask = poisoned_mask(before, bundle.unlabeled)
        state["n_u"], state["n_p"] = len(bundle.unlabeled), int(mask.sum())
        if manifest is not None:
            manifest.write(run_dir / "manifest.csv")
            state["manifest"] = str(run_dir / "manifest.csv")
        if cfg.platform:
            stage("platform")
            bundle = apply_platform(cfg, bundle, mask)
        if cfg.save_images:
            _save_examples(run_dir, bundle.unlabeled, mask, cfg.save_images)
        if cfg.corruption:
            stage("corruption")
            bundle = apply_corruption(cfg, bundle)
        stage("train")
        spec = ModelSpec(cfg.model["backbone"], tuple(bundle.image_shape), bundle.num_classes, cfg.model["width"])
        snapshot = {}
        dcfg = cfg.defense

        def on_epoch(row, model):
            log.debug("epoch %s", row)
            if dcfg and dcfg["kdensity"] and row["epoch"] == min(dcfg["warmup_epochs"], cfg.schedule["epochs"]):
                snapshot["model"] = copy.deepcopy(model)

        try:
            model, trace = train(bundle, spec, SSLConfig(**cfg.ssl), Schedule(**cfg.schedule, seed=cfg.seed),
                                 on_epoch=on_epoch, policies=policies_for(cfg))
        except TrainingError as e:
            if e.trace is not None:
                e.trace.write_csv(run_dir / "trace.csv")
            raise
        trace.write_csv(run_dir / "trace.csv")
        state["trace"] = str(run_dir / "trace.csv")
        save_checkpoint(model, spec, run_dir / "model.pt")
        stage("evaluate")
        labels = bundle.test.labels if bundle.test.labels is not None else bundle.test.hidden.reveal("evaluation")
        logits = predict_logits(model, bundle.test.images)
        state["topk"] = {str(k): topk_accuracy(logits, labels, k) for k in cfg.topk}
        state["acc"] = state["topk"]["1"]
        state["naive"] = naive_accuracy(labels)
        if dcfg and dcfg["kdensity"]:
            stage("defense")
            state["defense"] = score_poisons(snapshot.get("model", model), bundle, mask, dcfg, run_dir)
        status, err, failed = "ok", None, None
    except Exception as e:  # recorded with the stage name, artifacts so far are kept
        status, failed = "failed", state["stage"]
        err = f"{type(e).__name__}: {e}"
        (run_dir / "error.txt").write_text(traceback.format_exc())
        log.error("[%s] stage %s failed: %s", run_dir.name, failed, err)
    rec = ResultRecord(cfg.hash(), status, failed, err, cfg.seed, state["acc"], state["topk"], state["naive"],
                       state["n_u"], state["n_p"], time.time() - t0, state["trace"], state["manifest"],
                       state["defense"], cfg.canonical())
    _atomic_write(done, rec.to_json())
    return rec


# --------------------------------------------------------------------- sweeps

def _set_dotted(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        if d.get(p) is None:
            d[p] = {}
        d = d[p]
    d[parts[-1]] = value


def _get_dotted(d, key):
    for p in key.split("."):
        if not isinstance(d, dict) or p not in d:
            return None
        d = d[p]
    return d


def expand_grid(base: dict, grid: dict) -> list[ExperimentConfig]:
    """Cartesian product over dotted keys, e.g. ``{"attack_params.pdr": [0, .1]}``."""
    import itertools

    keys = list(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        d = copy.deepcopy(base)
        for k, v in zip(keys, values):
            _set_dotted(d, k, v)
        out.append(ExperimentConfig.from_dict(d))
    return out


def load_sweep(path):
    """Sweep file: ``{base: {...}, grid: {dotted.key: [values]}, parallelism: n}``.

    ``grid`` may also be a list of such mappings; the cells of all of them
    are concatenated (duplicates by hash are dropped).
    """
    d = read_structured(path)
    if "grid" not in d:
        raise ConfigError(f"sweep file {path} needs a 'grid' section")
    grids = d["grid"] if isinstance(d["grid"], list) else [d["grid"]]
    configs, keys, seen = [], [], set()
    for g in grids:
        if not isinstance(g, dict):
            raise ConfigError(f"sweep file {path}: every grid must be a mapping")
        for c in expand_grid(d.get("base", {}), g):
            if c.hash() not in seen:
                seen.add(c.hash())
                configs.append(c)
        keys += [k for k in g if k not in keys]
    return configs, keys, int(d.get("parallelism", 1))


def _varying_keys(configs):
    flat = [_flatten(c.canonical()) for c in configs]
    keys = sorted({k for f in flat for k in f})
    return [k for k in keys if len({json.dumps(f.get(k), sort_keys=True) for f in flat}) > 1]


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


SWEEP_COLUMNS = ("hash", "status", "stage", "acc_test", "naive_acc", "n_poisoned", "wall_clock")


def write_results_csv(path, records, keys):
    rows = []
    for r in records:
        row = {k: json.dumps(_get_dotted(r.config, k)) if isinstance(_get_dotted(r.config, k), (list, dict))
               else _get_dotted(r.config, k) for k in keys}
        row.update(hash=r.config_hash, status=r.status, stage=r.stage or "", acc_test=r.acc_test,
                   naive_acc=r.naive_acc, n_poisoned=r.n_poisoned, wall_clock=round(r.wall_clock, 2))
        rows.append(row)
    import io
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(keys) + list(SWEEP_COLUMNS), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _atomic_write(Path(path), buf.getvalue())


def _run_one(cfg):
    return run_experiment(cfg)


def sweep(configs, parallelism: int = 1, results_csv=None, keys=None) -> list[ResultRecord]:
    """Run every config (completed hashes are reused) and tabulate the results."""
    configs = list(configs)
    if not configs:
        raise ValueError("sweep grid is empty")
    keys = list(keys) if keys is not None else _varying_keys(configs)
    records = [None] * len(configs)
    todo = []
    for i, c in enumerate(configs):
        done = c.run_dir() / "result.json"
        rec = ResultRecord.read(done) if done.exists() else None
        if rec is not None and rec.ok:
            records[i] = rec
        else:
            todo.append(i)

    def flush():
        if results_csv is not None:
            write_results_csv(results_csv, [r for r in records if r is not None], keys)

    if parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(parallelism) as ex:
            for i, rec in zip(todo, ex.map(_run_one, [configs[i] for i in todo])):
                records[i] = rec
                flush()
    else:
        for i in todo:
            records[i] = run_experiment(configs[i])
            flush()
    flush()
    return records


def collect_records(runs_dir) -> list[ResultRecord]:
    return [ResultRecord.read(p) for p in sorted(Path(runs_dir).glob("*/result.json"))]


# -------------------------------------------------------------------- reports

ALGORITHM_COLUMNS = ("mixmatch", "uda", "fixmatch")


def scenario_label(config: dict) -> str:
    a, p = config["attack"], config["attack_params"]
    if a == "none" or p.get("pdr", 1) == 0:
        label = "benign"
    elif a in PATTERN_ATTACKS:
        label = f"{a} pdr={p['pdr']:g} pv={p['pv']:g}"
    elif a == "remove":
        label = f"remove {p['pdr']:g}"
    else:
        label = f"{a} pdr={p['pdr']:g}"
    if config.get("platform"):
        label += f" [{config['platform']}]"
    if config.get("corruption"):
        label += f" [{config['corruption']['kind']}]"
    return label


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def scenario_table(records):
    """{scenario: {algorithm: median top-1 accuracy}} over ok records."""
    cells = {}
    for r in records:
        if not r.ok:
            continue
        cells.setdefault(scenario_label(r.config), {}).setdefault(r.config["ssl"]["algorithm"], []).append(r.acc_test)
    return {s: {a: _median(v) for a, v in algs.items()} for s, algs in cells.items()}


def _pattern_points(records, axis, series):
    """{series value: {axis value: median acc}} for pattern-attack records (pdr=0 counts as benign)."""
    pts = {}
    for r in records:
        if not r.ok or r.config["attack"] not in PATTERN_ATTACKS:
            continue
        p = r.config["attack_params"]
        pts.setdefault(p[series], {}).setdefault(p[axis], []).append(r.acc_test)
    return {s: {x: _median(v) for x, v in sorted(d.items())} for s, d in sorted(pts.items())}


def emit_report(records, out_dir, format: str = "both") -> list[Path]:
    """Scenario table (rows = scenarios, columns = algorithms) and PDR/PV curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    table = scenario_table(records)
    order = sorted(table, key=lambda s: (s != "benign", s))
    path = out_dir / "scenarios.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scenario", *ALGORITHM_COLUMNS])
        for s in order:
            w.writerow([s, *("" if table[s].get(a) is None else f"{100 * table[s][a]:.2f}" for a in ALGORITHM_COLUMNS)])
    written.append(path)
    by_pv = _pattern_points(records, "pdr", "pv")
    path = out_dir / "pdr_pv_matrix.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pv", "pdr", "median_acc"])
        for pv, d in by_pv.items():
            for pdr, acc in d.items():
                w.writerow([pv, pdr, acc])
    written.append(path)
    if format in ("both", "png") and by_pv:
        naive = _median([r.naive_acc for r in records if r.ok])
        written.append(_plot(by_pv, "PDR", "PV", naive, out_dir / "pdr_curve.png"))
        written.append(_plot(_pattern_points(records, "pv", "pdr"), "PV", "PDR", naive, out_dir / "pv_curve.png"))
    return written


def _plot(series, xlabel, slabel, naive, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for s, d in series.items():
        xs = list(d)
        ax.plot(xs, [100 * d[x] for x in xs], marker="o", label=f"{slabel}={s:g}")
    if naive is not None:
        ax.axhline(100 * naive, color="grey", linestyle="--", label="naive classifier")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
