"""Distillation engine: unrolled student SGD plus weighted trajectory matching.

Each iteration replays one teacher segment: a student starts from the teacher
snapshot at a random epoch, takes a few SGD steps on minibatches of the
distilled images with a trainable learning rate, and the gap to the teacher
snapshot a fixed number of epochs later is measured by a per-parameter
weighted squared error, normalized by the raw teacher segment length.  One
meta-gradient step per iteration then updates the learning rate, the weight
vector, and the distilled images by differentiating through all student steps.

Modes: ``iadd`` learns the weight vector, ``mtt`` freezes it at ones, and
``ddpp`` replaces it each iteration with a binary mask that drops dimensions
whose student/teacher gap exceeds a threshold.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import DistilledDataset, LabeledDataset, augment, init_distilled, normalize_policy
from .errors import (
    ConfigError,
    DegenerateSegmentError,
    DistillRunError,
    FileFormatError,
    IterationAbort,
    ShapeError,
)
from .models import ArchSpec
from .trajectories import sample_start

log = logging.getLogger(__name__)

MODES = ("iadd", "mtt", "ddpp")
ALPHA_FLOOR = 1e-6

WEIGHTS_MAGIC = b"WADP"


@dataclass(frozen=True)
class DistillConfig:
    """Knobs of one distillation run (seed included for full determinism)."""

    iterations: int = 500          # meta-updates (T)
    student_steps: int = 5         # SGD steps per iteration (J)
    teacher_window: int = 2        # teacher epochs spanned by the target (K)
    start_bound: int = 0           # exclusive upper limit of the start epoch; 0 = auto
    alpha_init: float = 0.05       # initial trainable student learning rate
    alpha_lr: float = 1e-2         # meta rate for the learning rate
    weight_lr: float = 1e-4        # meta rate for the per-parameter weights
    image_lr: float = 3.0          # meta rate for the distilled pixels
    mode: str = "iadd"
    prune_threshold: float = 0.0   # ddpp mode only
    ipc: int = 1
    batch_size: int = 256
    augment_policy: tuple = ()
    seed: int = 0
    checkpoint_interval: int = 100
    analysis_window: int = 10
    max_abort_fraction: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "augment_policy", normalize_policy(self.augment_policy))
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.student_steps < 1:
            raise ConfigError("student_steps must be >= 1")
        if self.teacher_window < 1:
            raise ConfigError("teacher_window must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; use one of {MODES}")
        for name in ("alpha_lr", "weight_lr", "image_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha_init <= 0:
            raise ConfigError("alpha_init must be > 0")
        if self.prune_threshold < 0:
            raise ConfigError("prune_threshold must be >= 0")
        if self.ipc < 1 or self.batch_size < 1:
            raise ConfigError("ipc and batch_size must be >= 1")
        if self.student_steps >= self.teacher_window:
            warnings.warn(
                f"student_steps={self.student_steps} >= teacher_window="
                f"{self.teacher_window}; intended regime is far fewer student steps",
                RuntimeWarning,
                stacklevel=2,
            )

    def resolve_start_bound(self, teacher_epochs: int) -> int:
        bound = self.start_bound or (teacher_epochs - self.teacher_window)
        if bound < 1 or bound + self.teacher_window > teacher_epochs + 1:
            raise ConfigError(
                f"start_bound {bound} incompatible with {teacher_epochs} teacher "
                f"epochs and window {self.teacher_window}"
            )
        return bound


@dataclass
class MetaState:
    """Mutable run state: everything the meta-updates touch."""

    alpha: float
    weights: np.ndarray
    distilled: DistilledDataset
    iteration: int = 0
    loss_history: list = field(default_factory=list)


@dataclass
class LossBreakdown:
    loss: Tensor                 # scalar, graph-connected
    numerator: Tensor            # weighted squared error, graph-connected
    denominator: float           # raw teacher segment length, squared
    abs_diff: np.ndarray         # |student - teacher target| per dimension


@dataclass
class ReportRow:
    iteration: int
    loss: float
    numerator: float
    denominator: float
    alpha: float
    w_mean: float
    w_std: float
    w_min: float
    w_max: float


@dataclass
class DistillResult:
    alpha: float
    weights: np.ndarray
    distilled: DistilledDataset
    report: list[ReportRow]
    mean_abs_diff: np.ndarray    # per-dimension, averaged over the last window
    aborted: int


# ---------------------------------------------------------------------------
# core operations


def student_unroll(theta_start: np.ndarray, alpha: Tensor, steps: int, loss_fn) -> Tensor:
    """Unroll plain SGD from a teacher snapshot; result stays differentiable.

    ``loss_fn(theta, step)`` returns the scalar training loss for that step;
    the returned parameter vector is a graph node through which gradients
    reach the learning rate and everything the loss touched.
    """
    if steps < 1:
        raise ConfigError("student unroll needs at least one step")
    alpha = ad.as_tensor(alpha)
    theta = Tensor(np.asarray(theta_start, dtype=ad.default_dtype()), requires_grad=True)
    for j in range(steps):
        loss = loss_fn(theta, j)
        value = float(loss.data)
        if not np.isfinite(value):
            raise IterationAbort(j, value)
        (g,) = ad.grad(loss, [theta], create_graph=True)
        theta = ad.sub(theta, ad.mul(alpha, g))
    return theta


class _MinibatchStream:
    """Without-replacement minibatches; reshuffles when a pass is exhausted."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = None
        self._pos = 0

    def next_batch(self) -> np.ndarray | None:
        if self.n <= self.batch_size:
            return None  # caller uses the full set
        if self._order is None or self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def make_step_loss(spec: ArchSpec, images: Tensor, onehot: np.ndarray,
                   batch_size: int, policy, rng):
    """Step-loss closure: sample a distilled minibatch, augment, cross-entropy."""
    stream = _MinibatchStream(images.shape[0], batch_size, rng)
    full_onehot = Tensor(onehot)

    def step_loss(theta: Tensor, step: int) -> Tensor:
        idx = stream.next_batch()
        if idx is None:
            xb, yb = images, full_onehot
        else:
            xb = ad.take_rows(images, idx)
            yb = Tensor(onehot[idx])
        logits = models.forward(spec, theta, augment(xb, policy, rng))
        return ad.softmax_cross_entropy_with_onehot(logits, yb)

    return step_loss


def weighted_matching_loss(theta_start: np.ndarray, theta_student: Tensor,
                           theta_target: np.ndarray, weights) -> LossBreakdown:
    """Squared error between weighted student and weighted teacher parameters,
    normalized by the unweighted teacher segment length.

    The denominator stays unweighted so late, nearly-converged teacher
    segments still supply usable supervision.
    """
    weights = ad.as_tensor(weights)
    p = theta_student.size
    start = np.asarray(theta_start, dtype=ad.default_dtype()).ravel()
    target = np.asarray(theta_target, dtype=ad.default_dtype()).ravel()
    if theta_student.shape != (p,) or start.size != p or target.size != p or weights.size != p:
        raise ShapeError(
            "weighted_matching_loss",
            (theta_student.shape, (start.size,), (target.size,), weights.shape),
            "all vectors must share length P",
        )
    seg = start - target
    denominator = float(seg @ seg)
    if denominator == 0.0:
        raise DegenerateSegmentError(
            "teacher start and target snapshots are identical; loss undefined"
        )
    target_t = Tensor(target)
    diff = ad.sub(ad.mul(weights, theta_student), ad.mul(weights, target_t))
    numerator = ad.squared_l2_norm(diff)
    loss = ad.scale(numerator, 1.0 / denominator)
    abs_diff = np.abs(theta_student.data - target)
    return LossBreakdown(loss, numerator, denominator, abs_diff)


def prune_mask(theta_student: np.ndarray, theta_target: np.ndarray,
               threshold: float) -> np.ndarray:
    """Binary weights: zero where the student/teacher gap exceeds the threshold."""
    if threshold < 0:
        raise ConfigError("prune threshold must be >= 0")
    diff = np.abs(np.asarray(theta_student) - np.asarray(theta_target))
    return (diff <= threshold).astype(ad.default_dtype())


def meta_step(state: MetaState, breakdown: LossBreakdown, cfg: DistillConfig,
              alpha_t: Tensor, weights_t: Tensor, images_t: Tensor) -> MetaState:
    """One SGD step on the learning rate, weights and distilled pixels."""
    wrt = [alpha_t, images_t]
    if cfg.mode == "iadd":
        wrt.append(weights_t)
    grads = ad.grad(breakdown.loss, wrt)
    for g in grads:
        if not np.all(np.isfinite(g.data)):
            raise IterationAbort(state.iteration, float(np.nan), what="meta gradient")

    g_alpha, g_images = grads[0], grads[1]
    state.alpha = max(state.alpha - cfg.alpha_lr * float(g_alpha.data), ALPHA_FLOOR)
    new_images = state.distilled.images - cfg.image_lr * g_images.data
    state.distilled = replace(state.distilled, images=new_images)
    if cfg.mode == "iadd":
        state.weights = state.weights - cfg.weight_lr * grads[2].data
        if np.any(state.weights < 0):
            log.warning("some adaptive weights went negative (min %.3g)", state.weights.min())
    state.iteration += 1
    state.loss_history.append(float(breakdown.loss.data))
    return state


# ---------------------------------------------------------------------------
# full run


def run_distillation(cfg: DistillConfig, trajectories, original: LabeledDataset,
                     spec: ArchSpec, checkpoint_fn=None) -> DistillResult:
    """Algorithm loop: sample a segment, unroll the student, match, meta-update.

    ``checkpoint_fn(state, iteration)``, when given, fires every
    ``checkpoint_interval`` completed iterations.  Fails if more than
    ``max_abort_fraction`` of iterations abort on non-finite values.
    """
    if not trajectories:
        raise ConfigError("need at least one teacher trajectory")
    p = models.param_count(spec)
    for t, traj in enumerate(trajectories):
        if traj.param_count != p:
            raise ConfigError(
                f"trajectory {t} has P={traj.param_count}, architecture needs {p}"
            )
    epochs = min(traj.epochs for traj in trajectories)
    start_bound = cfg.resolve_start_bound(epochs)

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    loop_rng = np.random.default_rng(seeds[1])

    state = MetaState(
        alpha=cfg.alpha_init,
        weights=np.ones(p, dtype=ad.default_dtype()),
        distilled=init_distilled(original, cfg.ipc, init_seed),
    )
    onehot = np.asarray(state.distilled.labels_onehot, dtype=ad.default_dtype())

    report: list[ReportRow] = []
    diff_window: list[np.ndarray] = []
    aborted = 0
    for t in range(cfg.iterations):
        _, theta_start, theta_target = sample_start(
            trajectories, cfg.teacher_window, start_bound, loop_rng
        )
        alpha_t = Tensor(np.array(state.alpha), requires_grad=True)
        images_t = Tensor(state.distilled.images, requires_grad=True)
        if cfg.mode == "iadd":
            weights_t = Tensor(state.weights, requires_grad=True)
        elif cfg.mode == "mtt":
            weights_t = Tensor(state.weights)
        else:
            weights_t = None  # built after the unroll from the current gap

        try:
            step_loss = make_step_loss(
                spec, images_t, onehot, cfg.batch_size, cfg.augment_policy, loop_rng
            )
            theta_student = student_unroll(theta_start, alpha_t, cfg.student_steps, step_loss)
            mask = None
            if cfg.mode == "ddpp":
                mask = prune_mask(theta_student.data, theta_target, cfg.prune_threshold)
                weights_t = Tensor(mask)
            breakdown = weighted_matching_loss(
                theta_start, theta_student, theta_target, weights_t
            )
            if not np.isfinite(float(breakdown.loss.data)):
                raise IterationAbort(cfg.student_steps, float(breakdown.loss.data))
            meta_step(state, breakdown, cfg, alpha_t, weights_t, images_t)
            if mask is not None:
                state.weights = mask
        except IterationAbort as abort:
            aborted += 1
            log.warning("iteration %d aborted: %s", t, abort)
            continue

        w = state.weights
        report.append(
            ReportRow(
                iteration=t,
                loss=float(breakdown.loss.data),
                numerator=float(breakdown.numerator.data),
                denominator=breakdown.denominator,
                alpha=state.alpha,
                w_mean=float(w.mean()),
                w_std=float(w.std()),
                w_min=float(w.min()),
                w_max=float(w.max()),
            )
        )
        diff_window.append(breakdown.abs_diff)
        if len(diff_window) > cfg.analysis_window:
            diff_window.pop(0)
        if checkpoint_fn is not None and (t + 1) % cfg.checkpoint_interval == 0:
            checkpoint_fn(state, t + 1)

    if aborted > cfg.max_abort_fraction * cfg.iterations:
        raise DistillRunError(
            f"{aborted}/{cfg.iterations} iterations aborted "
            f"(limit {cfg.max_abort_fraction:.0%}); run failed"
        )
    mean_abs_diff = (
        np.mean(np.stack(diff_window), axis=0) if diff_window else np.zeros(p)
    )
    return DistillResult(
        alpha=state.alpha,
        weights=state.weights.copy(),
        distilled=state.distilled,
        report=report,
        mean_abs_diff=mean_abs_diff,
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# weight vector file (magic WADP, u64 P, P float32)


def save_weights(path, weights: np.ndarray) -> None:
    w = np.ascontiguousarray(weights, dtype="<f4")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<Q", w.size))
        f.write(w.tobytes())


def load_weights(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        (p,) = struct.unpack("<Q", f.read(8))
        body = f.read(p * 4)
        if len(body) != p * 4:
            raise FileFormatError(f"truncated weights: expected {p * 4} bytes, got {len(body)}")
        extra = f.read(1)
        if extra:
            raise FileFormatError("trailing bytes after weight vector")
    return np.frombuffer(body, dtype="<f4").astype(ad.default_dtype())
