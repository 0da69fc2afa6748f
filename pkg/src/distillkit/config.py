"""Run configuration: flat ``key = value`` text under ``[section]`` headers.

Unknown sections or keys are hard errors; every value is typed against the
schema below.  ``parse -> serialize -> parse`` is the identity on the typed
representation.  A single master seed fans out to per-subsystem seeds so one
number pins the whole pipeline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .data import AUGMENT_POLICIES, normalize_policy
from .errors import ConfigError

_MODES = ("iadd", "mtt", "ddpp")


@dataclass
class DataSection:
    kind: str = "synthetic"           # synthetic | file
    path: str = ""                    # dataset file for kind=file
    test_path: str = ""               # held-out test file for kind=file
    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 8
    channels: int = 1
    cluster_std: float = 0.35
    zca: bool = True
    zca_lambda: float | None = None   # None = scale-aware default


@dataclass
class ModelSection:
    kind: str = "convnet"
    depth: int = 2
    width: int = 16


@dataclass
class TeacherSection:
    count: int = 10
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64


@dataclass
class DistillSection:
    iterations: int = 500
    student_steps: int = 5
    teacher_window: int = 2
    start_bound: int = 0              # 0 = epochs - teacher_window
    alpha_init: float = 0.05
    alpha_lr: float = 1e-2
    weight_lr: float = 1e-4
    image_lr: float = 3.0
    mode: str = "iadd"
    prune_threshold: float = 0.0
    ipc: int = 1
    batch_size: int = 256
    augment: tuple = ()
    checkpoint_interval: int = 100
    analysis: bool = True


@dataclass
class EvalSection:
    trials: int = 5
    epochs: int = 200
    lr: float | None = None           # None = learned alpha when available
    momentum: float = 0.9
    batch_size: int = 256
    use_learned_alpha: bool = True
    augment: tuple = ()
    architectures: tuple = ()         # extra archs as kind:depth:width tokens
    assert_min_gain: float = 5.0      # accuracy points over random, --assert mode


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "f64"            # f32 | f64


@dataclass
class Settings:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "Settings":
        if self.data.kind not in ("synthetic", "file"):
            raise ConfigError(f"data.kind {self.data.kind!r}: use synthetic or file")
        if self.data.kind == "file" and not self.data.path:
            raise ConfigError("data.kind=file requires data.path")
        if self.distill.mode not in _MODES:
            raise ConfigError(f"distill.mode {self.distill.mode!r}: use one of {_MODES}")
        if self.run.precision not in ("f32", "f64"):
            raise ConfigError(f"run.precision {self.run.precision!r}: use f32 or f64")
        normalize_policy(self.distill.augment)
        normalize_policy(self.eval.augment)
        for token in self.eval.architectures:
            parse_arch_token(token)
        return self

    def seeds(self) -> dict[str, int]:
        """Deterministic per-subsystem seeds derived from the master seed."""
        names = ("data", "teachers", "distill", "eval")
        children = np.random.SeedSequence(self.run.seed).spawn(len(names))
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def parse_arch_token(token: str):
    """kind:depth:width token used for cross-architecture evaluation lists."""
    parts = token.split(":")
    if len(parts) != 3:
        raise ConfigError(f"architecture token {token!r} must be kind:depth:width")
    kind, depth, width = parts
    if kind not in ("mlp", "convnet"):
        raise ConfigError(f"architecture token {token!r}: unknown kind {kind!r}")
    try:
        return kind, int(depth), int(width)
    except ValueError:
        raise ConfigError(f"architecture token {token!r}: depth/width must be integers") from None


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "teacher": TeacherSection,
    "distill": DistillSection,
    "eval": EvalSection,
    "run": RunSection,
}

# Keys whose value may be the token "auto" (stored as None).
_OPTIONAL_FLOATS = {("data", "zca_lambda"), ("eval", "lr")}


def _parse_value(section: str, key: str, text: str, pytype):
    text = text.strip()
    if (section, key) in _OPTIONAL_FLOATS:
        return None if text == "auto" else float(text)
    if pytype is bool:
        if text not in ("true", "false"):
            raise ConfigError(f"{section}.{key}: expected true/false, got {text!r}")
        return text == "true"
    if pytype is int:
        return int(text)
    if pytype is float:
        return float(text)
    if pytype is tuple:
        return tuple(t.strip() for t in text.split(",") if t.strip())
    return text


def _format_value(section: str, key: str, value) -> str:
    if (section, key) in _OPTIONAL_FLOATS and value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_types(cls):
    out = {}
    for f in fields(cls):
        default = getattr(cls(), f.name)
        if isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float) or default is None:
            out[f.name] = float
        elif isinstance(default, tuple):
            out[f.name] = tuple
        else:
            out[f.name] = str
    return out


def parse_config(text: str) -> Settings:
    settings = Settings()
    section = None
    schema = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(
                    f"line {lineno}: unknown section [{name}]; "
                    f"allowed: {', '.join(sorted(_SECTIONS))}"
                )
            section = name
            schema = _field_types(_SECTIONS[name])
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in schema:
            raise ConfigError(
                f"line {lineno}: unknown key {section}.{key}; "
                f"allowed keys: {', '.join(sorted(schema))}"
            )
        try:
            parsed = _parse_value(section, key, value, schema[key])
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(
                f"line {lineno}: bad value {value.strip()!r} for {section}.{key}"
            ) from None
        setattr(getattr(settings, section), key, parsed)
    return settings.validate()


def serialize_config(settings: Settings) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        block = getattr(settings, name)
        for f in fields(block):
            lines.append(f"{f.name} = {_format_value(name, f.name, getattr(block, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> Settings:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def config_hash(settings: Settings) -> str:
    return hashlib.sha256(serialize_config(settings).encode("utf-8")).hexdigest()


__all__ = [
    "Settings",
    "DataSection",
    "ModelSection",
    "TeacherSection",
    "DistillSection",
    "EvalSection",
    "RunSection",
    "parse_config",
    "serialize_config",
    "load_config",
    "config_hash",
    "parse_arch_token",
    "AUGMENT_POLICIES",
]
