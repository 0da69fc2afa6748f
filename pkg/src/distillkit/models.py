"""Teacher/student network definitions and the flat parameter vector bridge.

All trainable parameters of a network live in one 1-D vector with a fixed
canonical order: layers in definition order, weight tensor before bias.  The
distillation losses and per-dimension analyses index into this order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn_ops
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

KINDS = ("mlp", "convnet")


@dataclass(frozen=True)
class ArchSpec:
    """Network family plus the knobs that fix its parameter count.

    ``depth`` counts conv blocks for convnets and hidden layers for the MLP;
    ``width`` is filters per block / hidden units.
    """

    kind: str
    depth: int
    width: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture kind {self.kind!r}; use one of {KINDS}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.width < 1:
            raise ConfigError("width must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.kind == "convnet":
            _, h, w = self.input_shape
            for _ in range(self.depth):
                if h % 2 or w % 2:
                    raise ConfigError(
                        f"spatial extent {h}x{w} not poolable {self.depth} times"
                    )
                h //= 2
                w //= 2
            if h < 1 or w < 1:
                raise ConfigError("spatial extent vanishes before the final layer")

    def label(self) -> str:
        base = f"convnetd{self.depth}" if self.kind == "convnet" else f"mlp{self.depth}"
        return f"{base}w{self.width}"


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape, offset) descriptors covering a flat vector."""

    entries: tuple[tuple[str, tuple[int, ...], int], ...]
    total: int

    def names_per_dim(self) -> np.ndarray:
        """Layer name for every flat index (used by analysis dumps)."""
        out = np.empty(self.total, dtype=object)
        for name, shape, offset in self.entries:
            out[offset : offset + int(np.prod(shape, dtype=np.int64))] = name
        return out


@dataclass
class FlatParams:
    """All trainable parameters of one network as a single 1-D vector."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1 or self.values.size != self.layout.total:
            raise ShapeError(
                "flat_params",
                (self.values.shape,),
                f"layout expects length {self.layout.total}",
            )

    @property
    def count(self) -> int:
        return self.layout.total


def _layer_shapes(spec: ArchSpec):
    """Yield (name, shape, fan_in, role) for every parameter tensor."""
    c, h, w = spec.input_shape
    if spec.kind == "mlp":
        fan = c * h * w
        for i in range(spec.depth):
            yield f"fc{i + 1}.weight", (fan, spec.width), fan, "weight"
            yield f"fc{i + 1}.bias", (spec.width,), fan, "bias"
            fan = spec.width
        yield "head.weight", (fan, spec.classes), fan, "weight"
        yield "head.bias", (spec.classes,), fan, "bias"
    else:
        chan = c
        for i in range(spec.depth):
            fan = chan * 9
            yield f"conv{i + 1}.weight", (spec.width, chan, 3, 3), fan, "weight"
            yield f"conv{i + 1}.bias", (spec.width,), fan, "bias"
            yield f"norm{i + 1}.weight", (spec.width,), fan, "norm_scale"
            yield f"norm{i + 1}.bias", (spec.width,), fan, "bias"
            chan = spec.width
            h //= 2
            w //= 2
        feat = chan * h * w
        yield "head.weight", (feat, spec.classes), feat, "weight"
        yield "head.bias", (spec.classes,), feat, "bias"


@lru_cache(maxsize=64)
def build_layout(spec: ArchSpec) -> Layout:
    entries = []
    offset = 0
    for name, shape, _, _ in _layer_shapes(spec):
        entries.append((name, shape, offset))
        offset += int(np.prod(shape, dtype=np.int64))
    return Layout(tuple(entries), offset)


def param_count(spec: ArchSpec) -> int:
    return build_layout(spec).total


def init_params(spec: ArchSpec, seed: int) -> FlatParams:
    """Fan-in uniform weights, zero biases, unit norm scales; seed-deterministic."""
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.empty(layout.total, dtype=ad.default_dtype())
    for (name, shape, offset), (_, _, fan, role) in zip(layout.entries, _layer_shapes(spec)):
        n = int(np.prod(shape, dtype=np.int64))
        if role == "weight":
            limit = np.sqrt(1.0 / fan)
            values[offset : offset + n] = rng.uniform(-limit, limit, size=n)
        elif role == "norm_scale":
            values[offset : offset + n] = 1.0
        else:
            values[offset : offset + n] = 0.0
    return FlatParams(values, layout)


def flatten(layered, layout: Layout) -> FlatParams:
    """Concatenate layered arrays in canonical order into one vector."""
    layered = list(layered)
    if len(layered) != len(layout.entries):
        raise ShapeError("flatten", (), f"expected {len(layout.entries)} arrays, got {len(layered)}")
    parts = []
    for arr, (name, shape, _) in zip(layered, layout.entries):
        arr = np.asarray(arr)
        if arr.shape != shape:
            raise ShapeError("flatten", (arr.shape,), f"{name} expects shape {shape}")
        parts.append(arr.ravel())
    return FlatParams(np.concatenate(parts), layout)


def unflatten(flat, layout: Layout):
    """Split a flat vector back into layered arrays (inverse of flatten)."""
    values = flat.values if isinstance(flat, FlatParams) else np.asarray(flat)
    if values.ndim != 1 or values.size != layout.total:
        raise ShapeError("unflatten", (values.shape,), f"layout expects length {layout.total}")
    out = []
    for _, shape, offset in layout.entries:
        n = int(np.prod(shape, dtype=np.int64))
        out.append(values[offset : offset + n].reshape(shape))
    return out


_SLICE_IDX_CACHE: dict = {}


def _param_views(params: Tensor, layout: Layout) -> dict[str, Tensor]:
    views = {}
    for name, shape, offset in layout.entries:
        n = int(np.prod(shape, dtype=np.int64))
        key = (offset, n)
        idx = _SLICE_IDX_CACHE.get(key)
        if idx is None:
            idx = np.arange(offset, offset + n, dtype=np.int64)
            _SLICE_IDX_CACHE[key] = idx
        views[name] = ad.take_flat(params, idx, shape)
    return views


def forward(spec: ArchSpec, params, batch) -> Tensor:
    """Logits for a batch; differentiable w.r.t. both params and batch.

    ``params`` may be a FlatParams (constants) or a Tensor already wired into
    a graph, e.g. an unrolled student parameter vector.
    """
    if isinstance(params, FlatParams):
        params = Tensor(params.values)
    params = ad.as_tensor(params)
    batch = ad.as_tensor(batch)
    layout = build_layout(spec)
    if params.shape != (layout.total,):
        raise ShapeError("forward", (params.shape,), f"expected ({layout.total},)")
    if batch.ndim != 4 or batch.shape[1:] != spec.input_shape:
        raise ShapeError(
            "forward", (batch.shape,), f"expected (N, {', '.join(map(str, spec.input_shape))})"
        )
    p = _param_views(params, layout)
    n = batch.shape[0]

    if spec.kind == "mlp":
        x = ad.reshape(batch, (n, -1))
        for i in range(spec.depth):
            x = ad.relu(ad.add(ad.matmul(x, p[f"fc{i + 1}.weight"]), p[f"fc{i + 1}.bias"]))
    else:
        x = batch
        width = spec.width
        for i in range(spec.depth):
            x = nn_ops.conv2d(x, p[f"conv{i + 1}.weight"], p[f"conv{i + 1}.bias"])
            x = nn_ops.instance_norm(x)
            gamma = ad.reshape(p[f"norm{i + 1}.weight"], (1, width, 1, 1))
            beta = ad.reshape(p[f"norm{i + 1}.bias"], (1, width, 1, 1))
            x = ad.add(ad.mul(x, gamma), beta)
            x = ad.relu(x)
            x = nn_ops.avg_pool2d(x)
        x = ad.reshape(x, (n, -1))
    return ad.add(ad.matmul(x, p["head.weight"]), p["head.bias"])
