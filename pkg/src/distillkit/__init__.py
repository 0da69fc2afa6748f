"""Desk-scale dataset distillation by weighted trajectory matching."""

__version__ = "0.1.0"

from .autodiff import (  # noqa: F401
    Tensor,
    as_tensor,
    default_dtype,
    grad,
    grad_check,
    set_default_dtype,
    using_dtype,
)
from .models import ArchSpec, FlatParams, flatten, forward, init_params, unflatten  # noqa: F401
from .data import DistilledDataset, LabeledDataset, augment, init_distilled  # noqa: F401
from .distill import DistillConfig, run_distillation  # noqa: F401
from .evaluate import EvalConfig, EvalReport  # noqa: F401
