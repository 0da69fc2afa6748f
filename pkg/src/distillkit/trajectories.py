"""Teacher pretraining and per-epoch parameter snapshots.

Trajectory file format (little-endian): magic ``TRAJ``, u32 version=1, the
architecture header (u8 kind, u32 depth, u32 width, u32 C, u32 H, u32 W,
u32 classes), u32 I (trained epochs), u64 P, u64 teacher seed, then
(I+1) * P float32 snapshots, epoch 0 (the untrained init) first.

Teacher pretraining is expensive relative to everything else, so stores are
content-addressed: the same dataset/arch/optimizer/seed combination is never
retrained.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import LabeledDataset, one_hot
from .errors import ConfigError, FileFormatError, TrajectoryStoreError
from .models import ArchSpec

TRAJ_MAGIC = b"TRAJ"
TRAJ_VERSION = 1
_KIND_CODE = {"mlp": 0, "convnet": 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


@dataclass
class TrajectoryFile:
    """One teacher's parameter snapshots: epoch 0 (init) through epoch I."""

    spec: ArchSpec
    snapshots: np.ndarray  # (I+1, P) float32
    teacher_seed: int

    def __post_init__(self):
        self.snapshots = np.ascontiguousarray(self.snapshots, dtype=np.float32)
        if self.snapshots.ndim != 2:
            raise ConfigError("snapshots must be (I+1, P)")
        if self.snapshots.shape[1] != models.param_count(self.spec):
            raise ConfigError(
                f"snapshot width {self.snapshots.shape[1]} != arch parameter count "
                f"{models.param_count(self.spec)}"
            )

    @property
    def epochs(self) -> int:
        return self.snapshots.shape[0] - 1

    @property
    def param_count(self) -> int:
        return self.snapshots.shape[1]


@dataclass(frozen=True)
class StartSample:
    trajectory_id: int
    start: int
    target: int


@dataclass(frozen=True)
class TeacherOptConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64


def _spec_header(spec: ArchSpec) -> bytes:
    c, h, w = spec.input_shape
    return struct.pack(
        "<B6I", _KIND_CODE[spec.kind], spec.depth, spec.width, c, h, w, spec.classes
    )


def _read_spec_header(f) -> ArchSpec:
    raw = f.read(25)
    if len(raw) != 25:
        raise FileFormatError("truncated architecture header")
    kind, depth, width, c, h, w, classes = struct.unpack("<B6I", raw)
    if kind not in _CODE_KIND:
        raise FileFormatError(f"unknown architecture code {kind}")
    return ArchSpec(_CODE_KIND[kind], depth, width, (c, h, w), classes)


def save_trajectory(path, traj: TrajectoryFile) -> None:
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<I", TRAJ_VERSION))
        f.write(_spec_header(traj.spec))
        f.write(struct.pack("<IQQ", traj.epochs, traj.param_count, traj.teacher_seed))
        f.write(traj.snapshots.astype("<f4").tobytes())


def _read_header(f):
    magic = f.read(4)
    if magic != TRAJ_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {TRAJ_MAGIC!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != TRAJ_VERSION:
        raise FileFormatError(f"unsupported trajectory version {version}")
    spec = _read_spec_header(f)
    epochs, p, seed = struct.unpack("<IQQ", f.read(20))
    if p != models.param_count(spec):
        raise FileFormatError(
            f"header P={p} does not match architecture parameter count "
            f"{models.param_count(spec)}"
        )
    return spec, epochs, p, seed


def inspect_trajectory(path):
    """Read (spec, epochs, P, seed) from the header without loading the body."""
    with open(path, "rb") as f:
        return _read_header(f)


def load_trajectory(path) -> TrajectoryFile:
    with open(path, "rb") as f:
        spec, epochs, p, seed = _read_header(f)
        body = f.read((epochs + 1) * p * 4)
        if len(body) != (epochs + 1) * p * 4:
            have = len(body) // (p * 4)
            raise FileFormatError(
                f"truncated body: snapshot {have} of {epochs + 1} incomplete"
            )
    snapshots = np.frombuffer(body, dtype="<f4").reshape(epochs + 1, p)
    return TrajectoryFile(spec, snapshots.copy(), seed)


# ---------------------------------------------------------------------------
# teacher training


def _train_one_teacher(original: LabeledDataset, spec: ArchSpec, epochs: int,
                       opt: TeacherOptConfig, seed: int) -> TrajectoryFile:
    init_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in
                               np.random.SeedSequence(seed).spawn(2))
    rng = np.random.default_rng(shuffle_seed)
    params = models.init_params(spec, init_seed).values.copy()
    onehot = one_hot(original.labels, original.classes)
    n = len(original)
    velocity = np.zeros_like(params)

    snaps = np.empty((epochs + 1, params.size), dtype=np.float32)
    snaps[0] = params
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, opt.batch_size):
            idx = order[lo : lo + opt.batch_size]
            theta = Tensor(params, requires_grad=True)
            logits = models.forward(spec, theta, Tensor(original.images[idx]))
            loss = ad.softmax_cross_entropy_with_onehot(logits, Tensor(onehot[idx]))
            (g,) = ad.grad(loss, [theta])
            step = g.data + opt.weight_decay * params if opt.weight_decay else g.data
            velocity = opt.momentum * velocity + step
            params = params - opt.lr * velocity
        snaps[epoch + 1] = params
    return TrajectoryFile(spec, snaps, seed)


def train_teachers(original: LabeledDataset, spec: ArchSpec, n_teachers: int,
                   epochs: int, opt: TeacherOptConfig, seeds) -> list[TrajectoryFile]:
    """Pretrain N independent teachers, snapshotting after every epoch."""
    if epochs < 1:
        raise ConfigError("teacher epochs must be >= 1")
    seeds = list(seeds)
    if len(seeds) != n_teachers:
        raise ConfigError(f"need {n_teachers} seeds, got {len(seeds)}")
    return [_train_one_teacher(original, spec, epochs, opt, s) for s in seeds]


# ---------------------------------------------------------------------------
# content-addressed store


def teacher_config_hash(dataset_hash: str, spec: ArchSpec, n_teachers: int,
                        epochs: int, opt: TeacherOptConfig, seeds) -> str:
    payload = json.dumps(
        {
            "dataset": dataset_hash,
            "arch": [spec.kind, spec.depth, spec.width, list(spec.input_shape), spec.classes],
            "teachers": n_teachers,
            "epochs": epochs,
            "opt": [opt.lr, opt.momentum, opt.weight_decay, opt.batch_size],
            "seeds": [int(s) for s in seeds],
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def ensure_teachers(store_dir, original: LabeledDataset, dataset_hash: str,
                    spec: ArchSpec, n_teachers: int, epochs: int,
                    opt: TeacherOptConfig, seeds):
    """Train or reuse trajectories; returns (paths, config_hash, reused)."""
    seeds = [int(s) for s in seeds]
    cfg_hash = teacher_config_hash(dataset_hash, spec, n_teachers, epochs, opt, seeds)
    root = Path(store_dir) / cfg_hash[:16]
    manifest_path = root / "manifest.json"
    paths = [root / f"teacher_{i:02d}.traj" for i in range(n_teachers)]

    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") != cfg_hash:
            raise TrajectoryStoreError(
                f"store {root} holds config {manifest.get('config_hash')}, "
                f"requested {cfg_hash}; refusing to overwrite"
            )
        missing = [p for p in paths if not p.exists()]
        if missing:
            raise TrajectoryStoreError(f"store {root} is missing {missing}")
        return paths, cfg_hash, True

    root.mkdir(parents=True, exist_ok=True)
    trajs = train_teachers(original, spec, n_teachers, epochs, opt, seeds)
    for path, traj in zip(paths, trajs):
        save_trajectory(path, traj)
    manifest_path.write_text(
        json.dumps(
            {
                "config_hash": cfg_hash,
                "dataset_hash": dataset_hash,
                "n_teachers": n_teachers,
                "epochs": epochs,
                "seeds": seeds,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return paths, cfg_hash, False


# ---------------------------------------------------------------------------
# sampling


def validate_start_bound(trajectories, window: int, start_bound: int) -> None:
    """start_bound is the exclusive upper limit of the random start epoch."""
    if start_bound < 1:
        raise ConfigError("start bound must be >= 1")
    for t, traj in enumerate(trajectories):
        if start_bound > traj.epochs - window + 1:
            raise ConfigError(
                f"start bound {start_bound} too large for trajectory {t}: "
                f"needs start + {window} <= {traj.epochs}"
            )


def sample_start(trajectories, window: int, start_bound: int, rng):
    """Uniformly pick a trajectory and a start epoch below the bound.

    Returns the sample plus the float32 snapshot pair (theta_start, theta_target).
    """
    validate_start_bound(trajectories, window, start_bound)
    t = int(rng.integers(0, len(trajectories)))
    i = int(rng.integers(0, start_bound))
    traj = trajectories[t]
    return StartSample(t, i, i + window), traj.snapshots[i], traj.snapshots[i + window]
