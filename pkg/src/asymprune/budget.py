"""Per-sample keep-ratio policies, their calibration, and physical vision pruning."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleError, InputError
from .scorer import keep_count, select_top_k
from .tokens import TokenSequence

RATIO_GRID = (0.9, 0.8, 0.75, 0.65, 0.5, 0.4)
GAP_QUANTILES = (0.2, 0.4, 0.6, 0.8)
SLOPE_GRID = tuple(round(-5.0 + 0.1 * i, 1) for i in range(51))
BUDGET_TOLERANCE = 0.02


@dataclass(frozen=True)
class ThresholdSweepPolicy:
    """Three gap tiers: below ``g_lo`` conservative, at or above ``g_hi`` aggressive."""

    g_lo: float
    g_hi: float
    r_conservative: float
    r_moderate: float
    r_aggressive: float
    kind: str = field(default="threshold", init=False)

    def __post_init__(self):
        if not self.g_lo < self.g_hi:
            raise ConfigError(f"need g_lo < g_hi, got {self.g_lo} >= {self.g_hi}")
        if not 1 >= self.r_conservative > self.r_moderate > self.r_aggressive > 0:
            raise ConfigError("need 1 >= r_conservative > r_moderate > r_aggressive > 0")

    def ratio(self, g: float) -> float:
        return keep_ratio_threshold(g, self)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LinearMapPolicy:
    """``clamp(r_target + a * (g - g_bar), r_min, r_max)``."""

    r_target: float
    a: float
    g_bar: float
    r_min: float
    r_max: float
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        if not 0 < self.r_min <= self.r_target <= self.r_max <= 1:
            raise ConfigError("need 0 < r_min <= r_target <= r_max <= 1")

    def ratio(self, g: float) -> float:
        return keep_ratio_linear(g, self)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UniformPolicy:
    r: float
    kind: str = field(default="uniform", init=False)

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise ConfigError("keep ratio must be in (0, 1]")

    def ratio(self, g: float) -> float:
        return self.r

    def to_dict(self) -> dict:
        return asdict(self)


def policy_from_dict(data: dict):
    data = dict(data)
    kind = data.pop("kind", None)
    cls = {"threshold": ThresholdSweepPolicy, "linear": LinearMapPolicy, "uniform": UniformPolicy}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown policy kind {kind!r}")
    return cls(**data)


def keep_ratio_threshold(g: float, policy: ThresholdSweepPolicy) -> float:
    if g < policy.g_lo:
        return policy.r_conservative
    if g < policy.g_hi:
        return policy.r_moderate
    return policy.r_aggressive


def keep_ratio_linear(g: float, policy: LinearMapPolicy) -> float:
    r = policy.r_target + policy.a * (g - policy.g_bar)
    return float(min(max(r, policy.r_min), policy.r_max))


def prune_vision(seq: TokenSequence, scores, r: float) -> TokenSequence:
    """Drop vision tokens outside the top ``keep_count(N, r)``; positions and text are kept."""
    vision = seq.vision_indices
    values = np.asarray(getattr(scores, "values", scores))
    if len(values) != len(vision):
        raise InputError(f"{len(values)} scores for {len(vision)} vision tokens")
    if not vision:
        return seq
    keep = {vision[i] for i in select_top_k(values, r)}
    return seq.subset([i for i in range(len(seq)) if i in keep or not seq[i].is_vision])


# ---------------------------------------------------------------------------
# calibration


class CalibrationSample:
    """A calibration item: its importance gap and a pruning-damage oracle.

    ``evaluate(k)`` returns the output MSE when only the ``k`` best vision
    tokens are kept; results are memoized because grid points share ``k``.
    """

    def __init__(self, gap: float, n_vision: int, evaluate: Callable[[int], float]):
        self.gap = float(gap)
        self.n_vision = int(n_vision)
        self._evaluate = evaluate
        self._memo: dict[int, float] = {}

    def mse_at(self, r: float) -> float:
        k = keep_count(self.n_vision, r)
        if k not in self._memo:
            self._memo[k] = float(self._evaluate(k))
        return self._memo[k]


def realized_average(policy, calibration: Sequence[CalibrationSample]) -> float:
    return float(np.mean([policy.ratio(c.gap) for c in calibration]))


def mean_mse(policy, calibration: Sequence[CalibrationSample]) -> float:
    return float(np.mean([c.mse_at(policy.ratio(c.gap)) for c in calibration]))


def _threshold_pairs(gaps: np.ndarray) -> list[tuple[float, float]]:
    qs = [float(q) for q in np.quantile(gaps, GAP_QUANTILES)]
    pairs = []
    for i, j in itertools.combinations(range(len(qs)), 2):
        lo, hi = qs[i], qs[j]
        if hi <= lo:
            # coincident quantiles: keep a single-tier candidate valid
            hi = float(np.nextafter(lo, np.inf))
        pairs.append((lo, hi))
    return pairs


def calibrate_threshold(
    calibration: Sequence[CalibrationSample],
    target_avg: float,
    tolerance: float = BUDGET_TOLERANCE,
    ratio_grid: Sequence[float] = RATIO_GRID,
    log: list | None = None,
) -> ThresholdSweepPolicy:
    """Grid search over gap-quantile thresholds and ordered ratio triples.

    Among policies whose average keep ratio is within ``tolerance`` of
    ``target_avg``, returns the one with the lowest mean output MSE; the
    first grid point wins ties.
    """
    if not calibration:
        raise InputError("calibration set is empty")
    gaps = np.array([c.gap for c in calibration])
    grid = sorted(set(ratio_grid), reverse=True)
    best, best_mse = None, np.inf
    for g_lo, g_hi in _threshold_pairs(gaps):
        for rc, rm, ra in itertools.combinations(grid, 3):
            policy = ThresholdSweepPolicy(g_lo, g_hi, rc, rm, ra)
            avg = realized_average(policy, calibration)
            feasible = abs(avg - target_avg) <= tolerance + 1e-12
            mse = mean_mse(policy, calibration) if feasible else None
            if log is not None:
                log.append({**policy.to_dict(), "realized_avg": avg, "feasible": feasible, "mse": mse})
            if feasible and mse < best_mse:
                best, best_mse = policy, mse
    if best is None:
        raise InfeasibleError(f"no threshold policy averages within {tolerance} of {target_avg}")
    return best


def calibrate_linear(
    calibration: Sequence[CalibrationSample],
    target_avg: float,
    r_min: float,
    r_max: float,
    tolerance: float = BUDGET_TOLERANCE,
    slopes: Sequence[float] = SLOPE_GRID,
    log: list | None = None,
) -> LinearMapPolicy:
    """Pick the slope in ``slopes`` (default -5..0 step 0.1) minimizing mean MSE under the budget."""
    if not calibration:
        raise InputError("calibration set is empty")
    g_bar = float(np.mean([c.gap for c in calibration]))
    best, best_mse = None, np.inf
    for a in slopes:
        policy = LinearMapPolicy(target_avg, float(a), g_bar, r_min, r_max)
        avg = realized_average(policy, calibration)
        feasible = abs(avg - target_avg) <= tolerance + 1e-12
        mse = mean_mse(policy, calibration) if feasible else None
        if log is not None:
            log.append({**policy.to_dict(), "realized_avg": avg, "feasible": feasible, "mse": mse})
        if feasible and mse < best_mse:
            best, best_mse = policy, mse
    if best is None:
        raise InfeasibleError(f"no slope averages within {tolerance} of {target_avg}")
    return best
