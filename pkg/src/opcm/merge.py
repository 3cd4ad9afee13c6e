"""Sequential orthogonal-projection merging with adaptive scaling.

The merged model after ``t`` experts is::

    theta_merged = theta0 + (lam_prev * d_merged + proj(d_t)) / lam_t

where ``proj`` is :func:`opcm.linalg.project_alpha` for linear weights and the
identity for every other parameter, and ``lam_t`` either keeps the merged
update's norm equal to the running mean task-vector norm (adaptive) or is
``sqrt(t)``.

:class:`MergeState` owns one writable copy of the merged parameters and is
updated in place, so a run over any number of experts keeps at most three
parameter sets alive: the base, the merged model and the incoming expert.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .exceptions import EmptySequence, NonFiniteValue
from .linalg import ProjectionSpec, frob_inner, project_alpha
from .tensorstore import Checkpoint, ParamKind, check_compatible


class ScalingMode(str, Enum):
    ADAPTIVE = "adaptive"
    SQRT_T = "sqrt_t"


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = 0.5
    scaling_mode: ScalingMode = ScalingMode.ADAPTIVE
    inclusive_lower_bound: bool = True
    eps: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "scaling_mode", ScalingMode(self.scaling_mode))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    @property
    def projection(self) -> ProjectionSpec:
        return ProjectionSpec(self.alpha, self.eps, self.inclusive_lower_bound)


@dataclass(frozen=True)
class StepRecord:
    step: int
    lambda_: float
    avg_norm: float
    incoming_norm: float
    orthogonality_residual: float
    # residual divided by max(1, |dW|_F |dW_merged|_F), worst matrix
    orthogonality_ratio: float
    merged_distance: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d


@dataclass
class MergeState:
    theta0: Checkpoint
    merged: dict
    lam: float
    avg_norm: float
    step: int
    config: MergeConfig
    log: list = field(default_factory=list)

    @property
    def theta_merged(self) -> Checkpoint:
        return current_model(self)


def _distance(a: Checkpoint, b, names) -> float:
    total = 0.0
    for n in names:
        d = (a[n] - b[n]).ravel()
        total += float(np.dot(d, d))
    return math.sqrt(total)


def init_state(theta0: Checkpoint, theta1: Checkpoint, config: MergeConfig = MergeConfig()) -> MergeState:
    """Start a merge from the first expert: merged = theta1, lambda = 1."""
    check_compatible(theta0, theta1)
    norm = _distance(theta1, theta0, theta0)
    merged = {n: np.array(theta1[n]) for n in theta0}
    state = MergeState(theta0, merged, 1.0, norm, 1, config)
    state.log.append(StepRecord(1, 1.0, norm, norm, 0.0, 0.0, norm))
    return state


def merge_step(state: MergeState, theta_t: Checkpoint) -> MergeState:
    """Fold one expert into ``state`` in place and return it."""
    theta0 = state.theta0
    check_compatible(theta0, theta_t)
    cfg = state.config
    spec = cfg.projection
    t = state.step + 1
    lam_prev = state.lam

    incoming_sq = 0.0
    numer_sq = 0.0
    residual = 0.0
    ratio = 0.0
    # Turn each merged tensor into the numerator lam_prev * d_merged + proj(d_t).
    for name in theta0:
        base = theta0[name]
        buf = state.merged[name]
        buf -= base  # buf now holds d_merged
        delta = theta_t[name] - base
        incoming_sq += float(np.dot(delta.ravel(), delta.ravel()))
        if theta0.kind(name) is ParamKind.LINEAR_WEIGHT:
            proj = project_alpha(delta, buf, spec)
            res = abs(frob_inner(proj, buf))
            scale = max(1.0, float(np.linalg.norm(delta)) * float(np.linalg.norm(buf)))
            residual = max(residual, res)
            ratio = max(ratio, res / scale)
        else:
            proj = delta
        buf *= lam_prev
        buf += proj
        numer_sq += float(np.dot(buf.ravel(), buf.ravel()))

    incoming = math.sqrt(incoming_sq)
    numer = math.sqrt(numer_sq)
    avg_norm = ((t - 1) * state.avg_norm + incoming) / t

    degenerate = avg_norm <= cfg.eps
    if cfg.scaling_mode is ScalingMode.ADAPTIVE:
        degenerate = degenerate or numer <= cfg.eps
        lam = 1.0 if degenerate else numer / avg_norm
    else:
        lam = 1.0 if degenerate else math.sqrt(t)

    dist_sq = 0.0
    for name in theta0:
        buf = state.merged[name]
        if degenerate:
            buf[...] = 0.0
        else:
            buf /= lam
        dist_sq += float(np.dot(buf.ravel(), buf.ravel()))
        buf += theta0[name]
        if not np.all(np.isfinite(buf)):
            raise NonFiniteValue(f"merged parameter {name!r} became non-finite at step {t}")

    state.lam = lam
    state.avg_norm = avg_norm
    state.step = t
    state.log.append(
        StepRecord(t, lam, avg_norm, incoming, residual, ratio, math.sqrt(dist_sq), degenerate)
    )
    return state


def current_model(state: MergeState) -> Checkpoint:
    """Snapshot of the merged parameters; later steps do not affect it."""
    return state.theta0.with_params(
        {n: a.copy() for n, a in state.merged.items()}, cls=Checkpoint
    )


def closed_form_merge(
    theta0: Checkpoint, experts: Sequence[Checkpoint], config: MergeConfig = MergeConfig()
) -> Checkpoint:
    """Merge by accumulating projected task vectors and dividing once at the end.

    Tracks ``S_t = sum_i proj_{i-1}(d_i)`` directly; the merged update at any
    step is ``S_t / lam_t`` and lambda is replayed from its definition. This
    never touches the rescale-in-place recursion used by :func:`merge_step`,
    so the two agreeing is a real check.
    """
    if len(experts) == 0:
        raise EmptySequence("closed_form_merge needs at least one expert")
    check_compatible(theta0, *experts)
    spec = config.projection
    names = list(theta0)
    deltas = [{n: e[n] - theta0[n] for n in names} for e in experts]
    norms = [math.sqrt(sum(float(np.sum(d[n] ** 2)) for n in names)) for d in deltas]

    acc = {n: deltas[0][n].copy() for n in names}
    lam = 1.0
    for t in range(2, len(experts) + 1):
        d = deltas[t - 1]
        for n in names:
            if theta0.kind(n) is ParamKind.LINEAR_WEIGHT:
                acc[n] = acc[n] + project_alpha(d[n], acc[n] / lam, spec)
            else:
                acc[n] = acc[n] + d[n]
        avg = sum(norms[:t]) / t
        total = math.sqrt(sum(float(np.sum(acc[n] ** 2)) for n in names))
        if config.scaling_mode is ScalingMode.ADAPTIVE:
            degenerate = avg <= config.eps or total <= config.eps
            lam = 1.0 if degenerate else total / avg
        else:
            degenerate = avg <= config.eps
            lam = 1.0 if degenerate else math.sqrt(t)
        if degenerate:
            acc = {n: np.zeros_like(acc[n]) for n in names}
    return theta0.with_params({n: theta0[n] + acc[n] / lam for n in names}, cls=Checkpoint)


def merge_sequence(theta0: Checkpoint, experts, config: MergeConfig = MergeConfig()) -> MergeState:
    """Run :func:`init_state` then :func:`merge_step` over an iterable of experts.

    ``experts`` may be a generator (e.g. loading files lazily) so that only
    one expert is resident at a time.
    """
    it = iter(experts)
    try:
        first = next(it)
    except StopIteration:
        raise EmptySequence("no experts to merge") from None
    state = init_state(theta0, first, config)
    del first
    for expert in it:
        merge_step(state, expert)
        del expert  # drop before the generator produces the next one
    return state


def max_relative_error(a: Checkpoint, b: Checkpoint) -> float:
    """Worst per-parameter ``max|a - b| / max(1, max|b|)``."""
    check_compatible(a, b)
    worst = 0.0
    for n in a:
        if a[n].size == 0:
            continue
        diff = float(np.max(np.abs(a[n] - b[n])))
        worst = max(worst, diff / max(1.0, float(np.max(np.abs(b[n])))))
    return worst
