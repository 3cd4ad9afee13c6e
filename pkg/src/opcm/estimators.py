"""scikit-learn style wrappers around the functional mergers.

Every merger follows the same protocol::

    merger = OPCMerger(alpha=0.5).fit(pretrained, experts)
    merger.merged_            # Checkpoint
    merger.partial_fit(next_expert)

``fit`` starts a fresh run; ``partial_fit`` folds in one more expert and
needs ``pretrained`` only on its first call. Hyperparameters are plain
constructor arguments, so ``get_params``/``set_params``/``clone`` work.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import baselines as bl
from .merge import MergeConfig, ScalingMode, current_model, init_state, merge_step
from ._validation import check_checkpoint, check_experts, check_fraction, check_nonnegative


class ContinualMerger(BaseEstimator):
    """Shared fit/partial_fit plumbing; subclasses supply ``_start`` and ``_step``."""

    def fit(self, pretrained, experts):
        experts = check_experts(experts)
        for attr in ("state_", "n_steps_"):
            self.__dict__.pop(attr, None)
        self._n_tasks_hint = len(experts) if hasattr(experts, "__len__") else None
        for expert in experts:
            self.partial_fit(expert, pretrained)
            del expert  # keep only one expert resident when experts is lazy
        return self

    def partial_fit(self, expert, pretrained=None):
        expert = check_checkpoint(expert, "expert")
        if not hasattr(self, "state_"):
            if pretrained is None:
                raise ValueError("the first partial_fit call needs the pretrained checkpoint")
            pretrained = check_checkpoint(pretrained, "pretrained")
            self.state_ = self._start(pretrained, expert)
        else:
            self._step(expert)
        self.n_steps_ = self.state_.step
        return self

    @property
    def merged_(self):
        check_is_fitted(self, "state_")
        return self._current()

    def _current(self):
        return self.state_.current_model()


class OPCMerger(ContinualMerger):
    """Orthogonal-projection continual merger.

    Parameters
    ----------
    alpha : float, default=0.5
        Fraction of the merged update's singular-value mass whose directions
        a new task vector is kept away from.
    scaling : {"adaptive", "sqrt_t"}, default="adaptive"
    inclusive_lower_bound : bool, default=True
        Whether the kept block of singular-basis coefficients starts at the
        threshold rank itself or one past it.
    eps : float, default=1e-12
        Norms at or below this are treated as zero.
    """

    def __init__(self, alpha=0.5, scaling="adaptive", inclusive_lower_bound=True, eps=1e-12):
        self.alpha = alpha
        self.scaling = scaling
        self.inclusive_lower_bound = inclusive_lower_bound
        self.eps = eps

    def _config(self) -> MergeConfig:
        check_fraction(self.alpha, "alpha")
        return MergeConfig(
            alpha=float(self.alpha),
            scaling_mode=ScalingMode(self.scaling),
            inclusive_lower_bound=bool(self.inclusive_lower_bound),
            eps=float(self.eps),
        )

    def _start(self, pretrained, expert):
        return init_state(pretrained, expert, self._config())

    def _step(self, expert):
        merge_step(self.state_, expert)

    def _current(self):
        return current_model(self.state_)

    @property
    def lambda_(self) -> float:
        check_is_fitted(self, "state_")
        return self.state_.lam

    @property
    def log_(self) -> list:
        check_is_fitted(self, "state_")
        return list(self.state_.log)


class SWAMerger(ContinualMerger):
    """Running arithmetic mean of the expert checkpoints."""

    def _start(self, pretrained, expert):
        return bl.init_baseline(bl.Method.SWA, pretrained, expert)

    def _step(self, expert):
        bl.swa_step(self.state_, expert)


class _ScaledMerger(ContinualMerger):
    def _lambda(self) -> float:
        if self.lambda_scale is None:
            return bl.default_lambda(getattr(self, "_n_tasks_hint", None))
        return check_nonnegative(self.lambda_scale, "lambda_scale")


class TaskArithmeticMerger(_ScaledMerger):
    """Continual task arithmetic: add ``lambda_scale`` times each task vector.

    ``lambda_scale=None`` picks 0.3 for runs of up to eight experts (or when
    the count is unknown) and 0.1 for longer runs.
    """

    def __init__(self, lambda_scale=None):
        self.lambda_scale = lambda_scale

    def _start(self, pretrained, expert):
        return bl.init_baseline(bl.Method.CTA, pretrained, expert, self._lambda())

    def _step(self, expert):
        bl.cta_step(self.state_, expert)


class TiesMerger(_ScaledMerger):
    """Continual Ties-Merging against the running merged task vector."""

    def __init__(self, lambda_scale=None, trim_fraction=0.2):
        self.lambda_scale = lambda_scale
        self.trim_fraction = trim_fraction

    def _start(self, pretrained, expert):
        cfg = bl.TiesConfig(trim_fraction=self.trim_fraction, lambda_scale=self._lambda())
        return bl.init_baseline(bl.Method.CTIES, pretrained, expert, ties=cfg)

    def _step(self, expert):
        bl.cties_step(self.state_, expert)


MERGERS = {
    "opcm": OPCMerger,
    "swa": SWAMerger,
    "ta": TaskArithmeticMerger,
    "ties": TiesMerger,
}


def make_merger(method: str, **params) -> ContinualMerger:
    """Instantiate a merger by its short name (``opcm``, ``swa``, ``ta``, ``ties``)."""
    try:
        cls = MERGERS[method]
    except KeyError:
        raise ValueError(f"unknown merge method {method!r}; choose from {sorted(MERGERS)}") from None
    return cls(**params)
