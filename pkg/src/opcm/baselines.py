"""Continual baseline mergers: weight averaging, task arithmetic and Ties-Merging.

Each baseline keeps a :class:`BaselineState` holding the base checkpoint and
one writable merged parameter set, updated in place per incoming expert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .tensorstore import Checkpoint, TaskVector, check_compatible


class Method(str, Enum):
    SWA = "swa"
    CTA = "ta"
    CTIES = "ties"


def default_lambda(n_tasks: Optional[int]) -> float:
    """Task-arithmetic scale: 0.3 for up to eight tasks, 0.1 beyond."""
    if n_tasks is not None and n_tasks > 8:
        return 0.1
    return 0.3


@dataclass(frozen=True)
class TiesConfig:
    trim_fraction: float = 0.2
    lambda_scale: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ValueError(f"trim_fraction must lie in (0, 1], got {self.trim_fraction}")
        if self.lambda_scale < 0:
            raise ValueError("lambda_scale must be nonnegative")


@dataclass
class BaselineState:
    method: Method
    theta0: Checkpoint
    merged: dict
    step: int
    lambda_scale: float = 1.0
    ties: Optional[TiesConfig] = None

    def current_model(self) -> Checkpoint:
        return self.theta0.with_params(
            {n: a.copy() for n, a in self.merged.items()}, cls=Checkpoint
        )


def init_baseline(
    method,
    theta0: Checkpoint,
    theta1: Checkpoint,
    lambda_scale: float = 0.3,
    ties: Optional[TiesConfig] = None,
) -> BaselineState:
    """First step of a baseline run.

    SWA starts from ``theta1``; task arithmetic and Ties start from
    ``theta0 + lambda * (theta1 - theta0)``.
    """
    method = Method(method)
    check_compatible(theta0, theta1)
    if method is Method.CTIES:
        if ties is None:
            ties = TiesConfig(lambda_scale=lambda_scale)
        lambda_scale = ties.lambda_scale
    if method is Method.SWA:
        merged = {n: np.array(theta1[n]) for n in theta0}
    else:
        merged = {n: theta0[n] + lambda_scale * (theta1[n] - theta0[n]) for n in theta0}
    return BaselineState(method, theta0, merged, 1, lambda_scale, ties)


def swa_step(state: BaselineState, theta_t: Checkpoint) -> BaselineState:
    check_compatible(state.theta0, theta_t)
    t = state.step + 1
    for n, buf in state.merged.items():
        buf *= t - 1
        buf += theta_t[n]
        buf /= t
    state.step = t
    return state


def cta_step(state: BaselineState, theta_t: Checkpoint) -> BaselineState:
    theta0 = state.theta0
    check_compatible(theta0, theta_t)
    for n, buf in state.merged.items():
        buf += state.lambda_scale * (theta_t[n] - theta0[n])
    state.step += 1
    return state


def _flat_rows(tvs: Sequence[Checkpoint]) -> np.ndarray:
    check_compatible(*tvs)
    return np.stack([tv.flatten() for tv in tvs])


def _unflatten(template: Checkpoint, flat: np.ndarray) -> TaskVector:
    params, pos = {}, 0
    for n, arr in template.items():
        params[n] = flat[pos:pos + arr.size].reshape(arr.shape).copy()
        pos += arr.size
    return TaskVector(params, template.kinds, copy=False)


def n_kept(size: int, trim_fraction: float) -> int:
    if size == 0:
        return 0
    # round first so 0.3 * 10 keeps 3, not 4
    return max(1, math.ceil(round(trim_fraction * size, 9)))


def trim(flat: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Zero all but the largest-magnitude ``trim_fraction`` of entries; earlier index wins ties."""
    k = n_kept(flat.size, trim_fraction)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out


def _trim_elect(tvs, cfg: TiesConfig):
    rows = _flat_rows(tvs)
    trimmed = np.stack([trim(r, cfg.trim_fraction) for r in rows])
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    return trimmed, agree


def ties_select(tvs: Sequence[Checkpoint], cfg: TiesConfig = TiesConfig()) -> list:
    """Trim each vector, elect signs, and keep only sign-consistent entries per vector."""
    trimmed, agree = _trim_elect(tvs, cfg)
    return [_unflatten(tvs[0], np.where(a, row, 0.0)) for row, a in zip(trimmed, agree)]


def ties_combine(tvs: Sequence[Checkpoint], cfg: TiesConfig = TiesConfig()) -> TaskVector:
    """Disjoint mean of the sign-consistent trimmed entries (0 where nothing survives)."""
    trimmed, agree = _trim_elect(tvs, cfg)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return _unflatten(tvs[0], merged)


def cties_step(state: BaselineState, theta_t: Checkpoint, cfg: Optional[TiesConfig] = None) -> BaselineState:
    """``merged = theta0 + lambda * (tau_merged' + tau_t')`` with both primed vectors from Ties selection."""
    theta0 = state.theta0
    check_compatible(theta0, theta_t)
    cfg = cfg or state.ties or TiesConfig(lambda_scale=state.lambda_scale)
    lam = cfg.lambda_scale
    tau_m = TaskVector({n: state.merged[n] - theta0[n] for n in theta0}, theta0.kinds, copy=False)
    tau_t = TaskVector({n: theta_t[n] - theta0[n] for n in theta0}, theta0.kinds, copy=False)
    sel_m, sel_t = ties_select([tau_m, tau_t], cfg)
    del tau_m, tau_t
    for n, buf in state.merged.items():
        buf[...] = theta0[n] + lam * (sel_m[n] + sel_t[n])
    state.step += 1
    return state


_STEPS = {Method.SWA: swa_step, Method.CTA: cta_step, Method.CTIES: cties_step}


def baseline_step(state: BaselineState, theta_t: Checkpoint) -> BaselineState:
    return _STEPS[state.method](state, theta_t)
