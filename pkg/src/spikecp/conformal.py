"""Conformal set prediction and adaptive stopping for checkpointed classifiers.

Given calibration losses that are exchangeable with the test example's loss,
the rank-based p-variable computed here satisfies ``Pr(p <= a) <= a`` for
every ``a`` in (0, 1). Thresholding the per-class p-variables at
``alpha = (1 - p_targ) / n_checkpoints`` (a Bonferroni split of the error
budget across checkpoints) yields prediction sets whose coverage is at least
``p_targ`` at whichever checkpoint inference stops.

Ensemble evidence is pooled either before the p-variable (confidence
merging: a generalized mean of member confidences, applied identically to
calibration data) or after it (p-variable merging: a family of functions
that map member p-variables to a single valid p-variable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from spikecp.snn import ScoreTrace, losses_from_confidence


class UnsupportedMergeExponent(ValueError):
    """Raised for p-merging exponents with no supported validity constant."""


@dataclass(frozen=True)
class SpikeCPConfig:
    """Operating point of the adaptive set predictor."""

    p_targ: float
    checkpoints: tuple[int, ...]
    set_size_threshold: int = 3
    merge: str = "cm"  # "cm" pools confidences, "pm" pools p-variables
    pool_exponent: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(int(t) for t in self.checkpoints))
        if not 0.0 < self.p_targ < 1.0:
            raise ValueError(f"target accuracy must lie in (0, 1): {self.p_targ}")
        if len(self.checkpoints) == 0 or any(
            b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])
        ):
            raise ValueError(f"checkpoints must be strictly increasing: {self.checkpoints}")
        if self.set_size_threshold < 1:
            raise ValueError("set-size threshold must be at least 1")
        if self.merge not in ("cm", "pm"):
            raise ValueError(f"merge mode must be 'cm' or 'pm': {self.merge!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"miscoverage budget per checkpoint is {self.alpha}")

    @property
    def alpha(self) -> float:
        """Per-checkpoint miscoverage budget ``(1 - p_targ) / n_checkpoints``."""
        return (1.0 - self.p_targ) / len(self.checkpoints)

    def with_(self, **kwargs) -> "SpikeCPConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class CalibrationTable:
    """True-label losses of the calibration set, per model and checkpoint.

    ``losses[k, t, i]`` is model k's log-loss for calibration example i's
    true label at checkpoint index t. Confidence-merged tables are derived
    on demand (member confidences are recoverable as ``exp(-loss)``).
    """

    checkpoints: tuple[int, ...]
    losses: np.ndarray  # (K, n_checkpoints, n_cal) float64
    num_classes: int
    model_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(int(t) for t in self.checkpoints))
        losses = np.asarray(self.losses, dtype=np.float64)
        if losses.ndim != 3 or losses.shape[1] != len(self.checkpoints):
            raise ValueError(f"losses must be (K, n_checkpoints, n_cal), got {losses.shape}")
        if losses.shape[2] == 0:
            raise ValueError("calibration table is empty")
        if not np.all(np.isfinite(losses)) or np.any(losses < 0):
            raise ValueError("calibration losses must be finite and non-negative")
        object.__setattr__(self, "losses", losses)

    @property
    def num_models(self) -> int:
        return self.losses.shape[0]

    @property
    def num_examples(self) -> int:
        return self.losses.shape[2]

    def merged_losses(self, pool_exponent: float) -> np.ndarray:
        """Confidence-merged calibration losses, shape (n_checkpoints, n_cal).

        A single-model table merges to itself exactly; otherwise member
        confidences are recovered as ``exp(-loss)``, pooled, and sent back
        through the log-loss. Test losses must follow the same arithmetic so
        that exchangeability (including ties) is preserved bit for bit.
        """
        if self.num_models == 1:
            return self.losses[0].copy()
        pooled = cm_pool(np.exp(-self.losses), pool_exponent, axis=0)
        return losses_from_confidence(pooled)


@dataclass(frozen=True)
class AdaptiveDecision:
    """Outcome of adaptive inference on one example."""

    stop_time: int
    stop_index: int
    prediction_set: tuple[int, ...]  # may be empty
    checkpoints: tuple[int, ...]
    diagnostics: np.ndarray  # per visited checkpoint: p-variables or confidences
    point_label: int | None = None
    top_set: tuple[int, ...] | None = None

    @property
    def set_size(self) -> int:
        return len(self.prediction_set)


def p_value(test_loss, cal_losses: np.ndarray):
    """Conformal p-variable of a test loss against calibration losses.

    ``p = (1 + #{i : test <= cal_i}) / (n + 1)`` with an inclusive
    comparison, so ties push the p-variable up (conservative). Accepts a
    scalar or an array of test losses; the output has the test shape.
    """
    cal_losses = np.asarray(cal_losses, dtype=np.float64)
    if cal_losses.ndim != 1 or cal_losses.size == 0:
        raise ValueError("calibration losses must be a non-empty vector")
    test = np.asarray(test_loss, dtype=np.float64)
    count = (test[..., None] <= cal_losses).sum(axis=-1)
    p = (1.0 + count) / (cal_losses.size + 1.0)
    return float(p) if np.isscalar(test_loss) or test.ndim == 0 else p


def predictive_set(p: np.ndarray, alpha: float) -> tuple[int, ...]:
    """Classes whose p-variable strictly exceeds the threshold."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"threshold must lie in (0, 1): {alpha}")
    return tuple(int(c) for c in np.flatnonzero(np.asarray(p) > alpha))


def stopping_time(set_sizes, cfg: SpikeCPConfig) -> int:
    """First checkpoint whose set size is within the target, else the last."""
    sizes = list(set_sizes)
    if len(sizes) != len(cfg.checkpoints):
        raise ValueError("one set size per checkpoint is required")
    for t, size in zip(cfg.checkpoints, sizes):
        if size <= cfg.set_size_threshold:
            return t
    return cfg.checkpoints[-1]


def cm_pool(confidences: np.ndarray, r: float, axis: int = 0) -> np.ndarray:
    """Generalized mean of member confidences along ``axis``.

    ``r=1`` is the arithmetic mean (standard model averaging), ``r=0`` the
    geometric mean, ``r=+inf``/``r=-inf`` the max/min limits. The result is
    not renormalized across classes.
    """
    f = np.asarray(confidences, dtype=np.float64)
    if math.isinf(r):
        return f.max(axis=axis) if r > 0 else f.min(axis=axis)
    if r == 0.0:
        # geometric mean; exact zero stays zero
        with np.errstate(divide="ignore"):
            return np.exp(np.mean(np.log(np.maximum(f, 1e-300)), axis=axis)) * np.all(
                f > 0, axis=axis
            )
    if r < 0.0:
        # negative exponents blow up on zeros; the limit there is zero
        positive = np.all(f > 0, axis=axis)
        safe = np.maximum(f, 1e-300)
        with np.errstate(over="ignore"):
            pooled = np.mean(safe**r, axis=axis) ** (1.0 / r)
        return np.where(positive, pooled, 0.0)
    return np.mean(f**r, axis=axis) ** (1.0 / r)


def pm_pool(p: np.ndarray, r: float, axis: int = 0) -> np.ndarray:
    """Merge member p-variables into a single p-variable.

    Supported exponents and their validity constants:

    * ``r=-inf`` with constant K: ``K * min(p)`` (a union bound),
    * ``r=+inf`` with constant 1: ``max(p)``,
    * finite ``r > 0`` with constant ``K**(1/r)``: ``(sum p_k**r)**(1/r)``,
      valid because it dominates ``max(p)``.

    The merged value is clamped to at most 1. Finite ``r <= 0`` has no
    supported constant and raises :class:`UnsupportedMergeExponent`.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[axis]
    if math.isinf(r):
        if r > 0:
            return p.max(axis=axis)
        return np.minimum(k * p.min(axis=axis), 1.0)
    if r <= 0.0:
        raise UnsupportedMergeExponent(
            f"no validity constant is implemented for finite exponent r={r}; "
            "use r=-inf, r=+inf, or finite r > 0"
        )
    # factor out the max so p**r cannot underflow for large r
    p_max = p.max(axis=axis, keepdims=True)
    ratios = np.divide(p, p_max, out=np.zeros_like(p), where=p_max > 0)
    merged = np.squeeze(p_max, axis=axis) * np.sum(ratios**r, axis=axis) ** (1.0 / r)
    return np.minimum(merged, 1.0)


def merged_test_losses(member_losses: np.ndarray, pool_exponent: float) -> np.ndarray:
    """Confidence-merged losses along axis 0, same arithmetic as
    :meth:`CalibrationTable.merged_losses`."""
    if member_losses.shape[0] == 1:
        return member_losses[0]
    pooled = cm_pool(np.exp(-member_losses), pool_exponent, axis=0)
    return losses_from_confidence(pooled)


def _checkpoint_p_values(
    traces: list[ScoreTrace], cal: CalibrationTable, cfg: SpikeCPConfig
) -> np.ndarray:
    """Per-checkpoint, per-class merged p-variables, shape (n_checkpoints, C)."""
    n_ckpt = len(cfg.checkpoints)
    n_classes = cal.num_classes
    if cfg.merge == "cm":
        member_losses = np.stack([tr.losses for tr in traces])  # (K, T, C)
        pooled_losses = merged_test_losses(member_losses, cfg.pool_exponent)
        cal_pooled = cal.merged_losses(cfg.pool_exponent)  # (T, n_cal)
        pvals = np.empty((n_ckpt, n_classes))
        for ti in range(n_ckpt):
            pvals[ti] = p_value(pooled_losses[ti], cal_pooled[ti])
        return pvals
    member_p = np.empty((len(traces), n_ckpt, n_classes))
    for k, tr in enumerate(traces):
        for ti in range(n_ckpt):
            member_p[k, ti] = p_value(tr.losses[ti], cal.losses[k, ti])
    return pm_pool(member_p, cfg.pool_exponent, axis=0)


def spikecp_decide(
    traces: list[ScoreTrace] | ScoreTrace,
    cal: CalibrationTable,
    cfg: SpikeCPConfig,
) -> AdaptiveDecision:
    """Adaptive conformal set prediction for one example.

    ``traces`` holds one score trace per ensemble member (a single trace is
    treated as a one-member ensemble). Prediction sets are built at every
    checkpoint from the merged p-variables; inference stops at the first
    checkpoint whose set is small enough, falling back to the last
    checkpoint, whose coverage is equally guaranteed by the Bonferroni
    split.
    """
    if isinstance(traces, ScoreTrace):
        traces = [traces]
    if len(traces) != cal.num_models:
        raise ValueError(
            f"{len(traces)} score traces for {cal.num_models} calibrated models"
        )
    for tr in traces:
        if tuple(tr.checkpoints) != cal.checkpoints:
            raise ValueError(
                f"trace checkpoints {tr.checkpoints} do not match "
                f"calibration checkpoints {cal.checkpoints}"
            )
    if cal.checkpoints != cfg.checkpoints:
        raise ValueError(
            f"calibration checkpoints {cal.checkpoints} do not match "
            f"configured checkpoints {cfg.checkpoints}"
        )
    if cfg.set_size_threshold > cal.num_classes:
        raise ValueError("set-size threshold exceeds the number of classes")

    pvals = _checkpoint_p_values(traces, cal, cfg)
    sets = [predictive_set(pvals[ti], cfg.alpha) for ti in range(len(cfg.checkpoints))]
    stop = stopping_time([len(s) for s in sets], cfg)
    stop_idx = cfg.checkpoints.index(stop)
    return AdaptiveDecision(
        stop_time=stop,
        stop_index=stop_idx,
        prediction_set=sets[stop_idx],
        checkpoints=cfg.checkpoints,
        diagnostics=pvals[: stop_idx + 1].copy(),
    )


def dc_snn_decide(
    confidences: np.ndarray,
    times,
    confidence_threshold: float,
    horizon: int,
    top_k: int = 3,
) -> AdaptiveDecision:
    """Confidence-threshold baseline: stop when the maximum pooled confidence
    reaches the threshold.

    ``confidences`` holds one pooled C-vector per evaluation time (shape
    ``(n_times, C)``). If no time crosses the threshold, the decision is
    made at ``horizon`` using the last available vector. The point decision
    is the argmax (lowest index on ties); ``top_set`` is the top-``top_k``
    predicted set.
    """
    # [0, 1): thresholds at or below 1/C stop at the first evaluation time,
    # which keeps the calibration grid's low end usable
    if not 0.0 <= confidence_threshold < 1.0:
        raise ValueError(f"confidence threshold must lie in [0, 1): {confidence_threshold}")
    conf = np.asarray(confidences, dtype=np.float64)
    times = [int(t) for t in times]
    if conf.ndim != 2 or conf.shape[0] != len(times):
        raise ValueError("one confidence vector per evaluation time is required")

    crossed = conf.max(axis=1) >= confidence_threshold
    if crossed.any():
        stop_idx = int(np.argmax(crossed))
        stop_time = times[stop_idx]
    else:
        stop_idx = len(times) - 1
        stop_time = int(horizon)
    final = conf[stop_idx]
    label = int(np.argmax(final))  # ties resolve to the lowest class index
    order = np.argsort(-final, kind="stable")
    top = tuple(sorted(int(c) for c in order[:top_k]))
    return AdaptiveDecision(
        stop_time=stop_time,
        stop_index=stop_idx,
        prediction_set=top,
        checkpoints=tuple(times),
        diagnostics=conf[: stop_idx + 1].copy(),
        point_label=label,
        top_set=top,
    )


def calibrate_dc_threshold(
    confidences: np.ndarray,
    labels: np.ndarray,
    p_targ: float,
    grid: np.ndarray,
    times,
    horizon: int,
) -> float:
    """Pick the confidence threshold from a grid using calibration accuracy.

    For each candidate threshold the stopped-time point decision is
    evaluated on every calibration example; the result is the smallest
    threshold whose empirical accuracy reaches ``p_targ``, or the smallest
    maximizer of the accuracy when none does.
    """
    conf = np.asarray(confidences, dtype=np.float64)  # (n, n_times, C)
    labels = np.asarray(labels)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("threshold grid must be non-empty and sorted ascending")
    if conf.ndim != 3 or conf.shape[0] != labels.size:
        raise ValueError("one confidence matrix per labeled calibration example")

    max_conf = conf.max(axis=2)  # (n, n_times)
    arg_conf = conf.argmax(axis=2)  # (n, n_times)
    n, n_times = max_conf.shape
    accuracies = np.empty(grid.size)
    for gi, pth in enumerate(grid):
        crossed = max_conf >= pth
        any_cross = crossed.any(axis=1)
        first = np.where(any_cross, crossed.argmax(axis=1), n_times - 1)
        predicted = arg_conf[np.arange(n), first]
        accuracies[gi] = np.mean(predicted == labels)
    return select_dc_threshold(grid, accuracies, p_targ)


def select_dc_threshold(grid: np.ndarray, accuracies: np.ndarray, p_targ: float) -> float:
    """Selection rule: smallest grid value whose accuracy reaches the target,
    else the smallest value among the accuracy maximizers."""
    grid = np.asarray(grid, dtype=np.float64)
    accuracies = np.asarray(accuracies, dtype=np.float64)
    feasible = accuracies >= p_targ
    if feasible.any():
        return float(grid[int(np.argmax(feasible))])
    return float(grid[int(np.argmax(accuracies))])
