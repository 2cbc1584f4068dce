"""Training loop, learning-rate schedule and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import augment, ssl
from .data import DatasetBundle, Split
from .errors import TrainingError
from .models import ModelSpec, build_model, to_tensor

TRACE_COLUMNS = ("epoch", "acc_X", "acc_U", "acc_test", "L_X", "L_U", "mask_rate")


def cosine_lr(step: int, total_steps: int, lr0: float, shape: str = "cosine7_16") -> float:
    """Cosine-decayed learning rate.

    ``cosine7_16``: ``lr0 * cos(7 pi step / (16 total))``, the SSL default,
    which ends at ~0.195 lr0. ``half_cosine``: ``lr0 * (1 + cos(pi t)) / 2``.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if lr0 < 0:
        raise ValueError("lr0 must be >= 0")
    t = step / total_steps
    if shape == "cosine7_16":
        return lr0 * math.cos(7.0 * math.pi * t / 16.0)
    if shape == "half_cosine":
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))
    raise ValueError(f"unknown schedule shape {shape!r}")


@dataclass
class Schedule:
    epochs: int = 30
    steps_per_epoch: int | None = None
    batch_labeled: int = 64
    batch_unlabeled: int = 64
    lr: float = 0.03
    lr_shape: str = "cosine7_16"
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    seed: int = 0
    eval_batch: int = 1000

    def resolve_steps(self, n_unlabeled: int, n_labeled: int) -> int:
        if self.steps_per_epoch:
            return self.steps_per_epoch
        if n_unlabeled:
            return math.ceil(n_unlabeled / self.batch_unlabeled)
        return max(1, math.ceil(n_labeled / self.batch_labeled))


@dataclass
class EpochTrace:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, key):
        return [r[key] for r in self.rows]

    def append(self, **row):
        self.rows.append({k: row[k] for k in TRACE_COLUMNS})

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as f:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]
        return cls(rows)


# ----------------------------------------------------------------- evaluation

@torch.no_grad()
def predict_logits(model, images, batch_size=1000) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(to_tensor(np.ascontiguousarray(images[i:i + batch_size])))
           for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0)


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of rows whose true label is among the ``k`` largest logits."""
    if k < 1:
        raise ValueError("k must be >= 1")
    logits = torch.as_tensor(logits)
    labels = labels if isinstance(labels, torch.Tensor) else torch.from_numpy(np.array(labels))
    if len(labels) == 0:
        return float("nan")
    k = min(k, logits.shape[1])
    top = logits.topk(k, dim=1).indices
    return float((top == labels[:, None]).any(dim=1).float().mean())


def evaluate(model, samples: Split, topk: int = 1, labels=None) -> float:
    """Top-k accuracy on a split. Sealed labels are read for evaluation only."""
    if labels is None:
        labels = samples.labels if samples.labels is not None else samples.hidden.reveal("evaluation")
    return topk_accuracy(predict_logits(model, samples.images), torch.from_numpy(np.array(labels)), topk)


# ------------------------------------------------------------------- training

def _views(images, algorithm, K, rng, weak, strong):
    if algorithm == "mixmatch":
        return (torch.stack([to_tensor(augment.augment_batch(images, weak, rng)) for _ in range(K)]),)
    w = augment.augment_batch(images, weak, rng)
    s = augment.augment_batch(augment.augment_batch(images, weak, rng), strong, rng)
    return to_tensor(w), to_tensor(s)


_STEPS = {
    "mixmatch": ssl.mixmatch_step,
    "uda": ssl.uda_step,
    "fixmatch": ssl.fixmatch_step,
}


def _epoch_eval(model, bundle):
    acc_x = evaluate(model, bundle.labeled) if len(bundle.labeled) else float("nan")
    acc_u = evaluate(model, bundle.unlabeled) if len(bundle.unlabeled) and bundle.unlabeled.hidden is not None else float("nan")
    acc_t = evaluate(model, bundle.test) if len(bundle.test) else float("nan")
    return acc_x, acc_u, acc_t


def _optimizer(model, schedule):
    return torch.optim.SGD(model.parameters(), lr=schedule.lr, momentum=schedule.momentum,
                           nesterov=schedule.nesterov and schedule.momentum > 0,
                           weight_decay=schedule.weight_decay)


def train(bundle: DatasetBundle, model_spec: ModelSpec, ssl_config: ssl.SSLConfig,
          schedule: Schedule, on_epoch=None, policies=None):
    """Train a model on ``bundle`` with the configured SSL algorithm.

    Labeled and unlabeled batches are drawn with replacement from separate
    seeded streams, so runs are repeatable and a run with ``lambda_u == 0``
    never touches the unlabeled data. ``policies`` is an optional
    ``(weak, strong)`` pair of per-image callables (e.g. AugmentPolicy);
    ``on_epoch(row, model)`` is called after every epoch's evaluation.
    Returns ``(model, EpochTrace)``.
    Raises :class:`TrainingError` (with the partial trace) on a non-finite loss.
    """
    if tuple(model_spec.input_shape) != tuple(bundle.image_shape):
        raise ValueError(f"model input {model_spec.input_shape} != data shape {bundle.image_shape}")
    if model_spec.num_classes != bundle.num_classes:
        raise ValueError(f"model has {model_spec.num_classes} outputs, data has {bundle.num_classes} classes")
    if len(bundle.labeled) == 0:
        raise ValueError("training needs at least one labeled sample")
    weak, strong = policies or (augment.weak_augment, augment.strong_augment)
    torch.manual_seed(schedule.seed)
    model = build_model(model_spec)
    opt = _optimizer(model, schedule)
    rng_x = np.random.default_rng([schedule.seed, 1])
    rng_u = np.random.default_rng([schedule.seed, 2])
    unl = bundle.unlabeled
    use_u = ssl_config.algorithm != "supervised" and ssl_config.lambda_u > 0 and len(unl) > 0
    spe = schedule.resolve_steps(len(unl), len(bundle.labeled))
    total = schedule.epochs * spe
    y_all = torch.from_numpy(np.array(bundle.labeled.labels))
    trace = EpochTrace()
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        model.train()
        sums = np.zeros(3)
        for _ in range(spe):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, schedule.lr, schedule.lr_shape)
            xi = rng_x.integers(0, len(bundle.labeled), schedule.batch_labeled)
            x = to_tensor(augment.augment_batch(bundle.labeled.images[xi], weak, rng_x))
            y = y_all[xi]
            if use_u:
                ui = rng_u.integers(0, len(unl), schedule.batch_unlabeled)
                views = _views(unl.images[ui], ssl_config.algorithm, ssl_config.K, rng_u, weak, strong)
                l_x, l_u, aux = _STEPS[ssl_config.algorithm](model, (x, y), views, ssl_config)
                if ssl_config.algorithm == "mixmatch":
                    aux = 1.0 if ssl_config.mixmatch_tau is None else float("nan")
                lam = ssl_config.lambda_u
                if ssl_config.rampup_steps:
                    lam *= min(1.0, step / ssl_config.rampup_steps)
                loss = l_x + lam * l_u
            else:
                l_x = F.cross_entropy(model(x), y)
                l_u, aux, loss = torch.zeros(()), 0.0, l_x
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += (float(l_x.detach()), float(l_u.detach()), aux)
            step += 1
        acc_x, acc_u, acc_t = _epoch_eval(model, bundle)
        m = sums / spe
        trace.append(epoch=epoch, acc_X=acc_x, acc_U=acc_u, acc_test=acc_t,
                     L_X=float(m[0]), L_U=float(m[1]), mask_rate=float(m[2]))
        if on_epoch is not None:
            on_epoch(trace.rows[-1], model)
    return model, trace


def train_supervised(bundle: DatasetBundle, model_spec: ModelSpec, schedule: Schedule):
    """Plain supervised loop on the labeled set (reference for labeled-only runs)."""
    torch.manual_seed(schedule.seed)
    model = build_model(model_spec)
    opt = _optimizer(model, schedule)
    rng_x = np.random.default_rng([schedule.seed, 1])
    spe = schedule.resolve_steps(len(bundle.unlabeled), len(bundle.labeled))
    total = schedule.epochs * spe
    labels = torch.from_numpy(np.array(bundle.labeled.labels))
    trace = EpochTrace()
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        model.train()
        loss_sum = 0.0
        for _ in range(spe):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, schedule.lr, schedule.lr_shape)
            xi = rng_x.integers(0, len(bundle.labeled), schedule.batch_labeled)
            x = to_tensor(augment.augment_batch(bundle.labeled.images[xi], augment.weak_augment, rng_x))
            loss = F.cross_entropy(model(x), labels[xi])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            step += 1
        acc_x, acc_u, acc_t = _epoch_eval(model, bundle)
        trace.append(epoch=epoch, acc_X=acc_x, acc_U=acc_u, acc_test=acc_t,
                     L_X=loss_sum / spe, L_U=0.0, mask_rate=0.0)
    return model, trace


def save_checkpoint(model, spec: ModelSpec, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"spec": asdict(spec), "state": model.state_dict()}, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    spec = ModelSpec(**{**ckpt["spec"], "input_shape": tuple(ckpt["spec"]["input_shape"])})
    model = build_model(spec)
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model, spec
