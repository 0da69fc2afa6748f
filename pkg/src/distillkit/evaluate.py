"""Measure distilled-set quality by training fresh students from scratch.

Each trial reinitializes the network with its own seed, trains with SGD plus
momentum on the candidate training set, and reports accuracy on a held-out
test set the training loop never sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import LabeledDataset, augment, normalize_policy, one_hot
from .errors import DataError, ShapeError
from .models import ArchSpec


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 5
    epochs: int = 200
    lr: float | None = None       # None: use the learned student rate if given, else 0.01
    momentum: float = 0.9
    batch_size: int = 256
    augment_policy: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "augment_policy", normalize_policy(self.augment_policy))
        if self.trials < 1:
            raise DataError("trials must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")

    def resolve_lr(self, learned_alpha: float | None) -> float:
        if self.lr is not None:
            return self.lr
        return learned_alpha if learned_alpha is not None else 0.01


@dataclass
class EvalReport:
    """Per-trial accuracies plus their summary for one (dataset, architecture) pair."""

    dataset_label: str
    arch_label: str
    accuracies: list[float]
    failures: int = 0
    error: str | None = None

    @property
    def trials(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")

    def summary(self) -> str:
        if self.error:
            return f"{self.dataset_label:>24s}  {self.arch_label:<14s}  error: {self.error}"
        return (
            f"{self.dataset_label:>24s}  {self.arch_label:<14s}  "
            f"{100 * self.mean:6.2f} +/- {100 * self.std:5.2f}  ({self.trials} trials)"
        )


def accuracy(spec: ArchSpec, params: np.ndarray, ds: LabeledDataset,
             batch_size: int = 512) -> float:
    """Fraction of argmax predictions matching the labels."""
    hits = 0
    for lo in range(0, len(ds), batch_size):
        chunk = ds.images[lo : lo + batch_size]
        logits = models.forward(spec, Tensor(params), Tensor(chunk))
        hits += int(np.sum(np.argmax(logits.data, axis=1) == ds.labels[lo : lo + batch_size]))
    return hits / len(ds)


def _train_student(spec, images, onehot, cfg: EvalConfig, lr: float, seed: int):
    """SGD-with-momentum training of one fresh student; returns params or None."""
    init_seed, order_seed = (int(s.generate_state(1)[0]) for s in
                             np.random.SeedSequence(seed).spawn(2))
    rng = np.random.default_rng(order_seed)
    params = models.init_params(spec, init_seed).values.copy()
    velocity = np.zeros_like(params)
    n = len(images)
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if n > cfg.batch_size else np.arange(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = augment(Tensor(images[idx]), cfg.augment_policy, rng)
            theta = Tensor(params, requires_grad=True)
            logits = models.forward(spec, theta, xb)
            loss = ad.softmax_cross_entropy_with_onehot(logits, Tensor(onehot[idx]))
            if not np.isfinite(float(loss.data)):
                return None
            (g,) = ad.grad(loss, [theta])
            velocity = cfg.momentum * velocity + g.data
            params = params - lr * velocity
    return params


def train_eval_student(images: np.ndarray, labels_onehot: np.ndarray, spec: ArchSpec,
                       test: LabeledDataset, cfg: EvalConfig,
                       learned_alpha: float | None = None,
                       dataset_label: str = "dataset") -> EvalReport:
    """Train ``cfg.trials`` students from scratch and score them on the test set."""
    if images.shape[1:] != spec.input_shape:
        raise ShapeError("train_eval_student", (images.shape,),
                         f"architecture expects {spec.input_shape}")
    lr = cfg.resolve_lr(learned_alpha)
    onehot = np.asarray(labels_onehot, dtype=ad.default_dtype())
    trial_seeds = [int(s.generate_state(1)[0]) for s in
                   np.random.SeedSequence(cfg.seed).spawn(cfg.trials)]
    accs, failures = [], 0
    for seed in trial_seeds:
        params = _train_student(spec, np.asarray(images, dtype=ad.default_dtype()),
                                onehot, cfg, lr, seed)
        if params is None:
            failures += 1
            continue
        accs.append(accuracy(spec, params, test))
    return EvalReport(dataset_label, spec.label(), accs, failures=failures)


def baseline_random(original: LabeledDataset, ipc: int, spec: ArchSpec,
                    test: LabeledDataset, cfg: EvalConfig) -> EvalReport:
    """Random-selection baseline: fresh ipc-per-class real subset every trial."""
    trial_seeds = [int(s.generate_state(1)[0]) for s in
                   np.random.SeedSequence(cfg.seed).spawn(cfg.trials)]
    accs, failures = [], 0
    for seed in trial_seeds:
        pick_rng = np.random.default_rng(seed)
        picks = []
        for c in range(original.classes):
            idx = original.class_indices(c)
            if len(idx) < ipc:
                raise DataError(f"class {c} has {len(idx)} samples, needs >= {ipc}")
            picks.append(pick_rng.choice(idx, size=ipc, replace=False))
        picks = np.concatenate(picks)
        onehot = one_hot(original.labels[picks], original.classes)
        params = _train_student(
            spec, np.asarray(original.images[picks], dtype=ad.default_dtype()),
            onehot, cfg, cfg.resolve_lr(None), seed,
        )
        if params is None:
            failures += 1
            continue
        accs.append(accuracy(spec, params, test))
    return EvalReport(f"random ipc={ipc}", spec.label(), accs, failures=failures)


def cross_arch_eval(images: np.ndarray, labels_onehot: np.ndarray, specs,
                    test: LabeledDataset, cfg: EvalConfig,
                    learned_alpha: float | None = None,
                    dataset_label: str = "distilled") -> list[EvalReport]:
    """Evaluate one distilled set on several architectures; bad shapes don't
    stop the remaining architectures."""
    reports = []
    for spec in specs:
        if images.shape[1:] != spec.input_shape:
            reports.append(
                EvalReport(
                    dataset_label,
                    spec.label(),
                    [],
                    error=f"input shape {images.shape[1:]} incompatible with "
                          f"{spec.input_shape}",
                )
            )
            continue
        reports.append(
            train_eval_student(
                images, labels_onehot, spec, test, cfg,
                learned_alpha=learned_alpha, dataset_label=dataset_label,
            )
        )
    return reports
