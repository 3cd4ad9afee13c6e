"""Small argument checks shared by the estimators, the CLI and deskbench."""

from __future__ import annotations

import math
from collections.abc import Iterable

from .exceptions import EmptySequence
from .tensorstore import Checkpoint


def check_checkpoint(obj, name: str = "checkpoint") -> Checkpoint:
    """Accept a Checkpoint or a plain mapping of arrays."""
    if isinstance(obj, Checkpoint):
        return obj
    if hasattr(obj, "items"):
        return Checkpoint(dict(obj.items()))
    raise TypeError(f"{name} must be a Checkpoint or mapping of arrays, got {type(obj).__name__}")


def check_experts(experts):
    if isinstance(experts, Checkpoint) or not isinstance(experts, Iterable):
        raise TypeError("experts must be an iterable of checkpoints")
    if hasattr(experts, "__len__") and len(experts) == 0:
        raise EmptySequence("no experts given")
    return experts


def check_fraction(value, name: str, *, low_open: bool = False) -> float:
    value = float(value)
    ok = (0.0 < value if low_open else 0.0 <= value) and value <= 1.0
    if not ok or math.isnan(value):
        bound = "(0, 1]" if low_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {bound}, got {value}")
    return value


def check_nonnegative(value, name: str) -> float:
    value = float(value)
    if not value >= 0.0 or math.isinf(value):
        raise ValueError(f"{name} must be a finite nonnegative number, got {value}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
