"""Complete-data estimation and Rubin's-rule pooling.

The analysis model is the unadjusted per-arm endpoint mean; the treatment
effect is their difference.  Pooled intervals use the total variance
W + (1 + 1/m) B with Barnard-Rubin small-sample degrees of freedom when a
complete-data df is supplied (classic Rubin df otherwise).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import EstimationError
from .imputation import CompletedDataset


@dataclass(frozen=True)
class CompleteEstimate:
    mean_control: float
    mean_treatment: float
    difference: float
    var_control: float
    var_treatment: float
    var_difference: float


@dataclass(frozen=True)
class PooledEstimate:
    point: float
    within: float
    between: float
    total: float
    df: float
    level: float
    ci_low: float
    ci_high: float
    m: int


def _arm_stats(values: np.ndarray, label: str) -> tuple[float, float]:
    if values.size == 0:
        raise EstimationError(f"no subjects in the {label} arm")
    if values.size < 2:
        raise EstimationError(f"need at least 2 subjects in the {label} arm for a variance")
    mean = float(values.mean())
    var_of_mean = float(values.var(ddof=1)) / values.size
    return mean, var_of_mean


def estimate_complete(completed: CompletedDataset) -> CompleteEstimate:
    """Per-arm endpoint means, their sampling variances, and the difference."""
    endpoints = np.asarray(completed.endpoints, dtype=float)
    if np.isnan(endpoints).any():
        raise EstimationError("completed dataset still has missing endpoints")
    arms = np.array([s.arm for s in completed.dataset.subjects])
    m0, v0 = _arm_stats(endpoints[arms == 0], "control")
    m1, v1 = _arm_stats(endpoints[arms == 1], "treatment")
    return CompleteEstimate(mean_control=m0, mean_treatment=m1, difference=m1 - m0,
                            var_control=v0, var_treatment=v1, var_difference=v0 + v1)


def estimate_matrix(arms: np.ndarray, endpoints: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized `estimate_complete` over an (m, n) endpoint matrix."""
    arms = np.asarray(arms)
    e = np.asarray(endpoints, dtype=float)
    out: dict[str, np.ndarray] = {}
    for arm, name in ((0, "control"), (1, "treatment")):
        cols = e[:, arms == arm]
        n = cols.shape[1]
        if n < 2:
            raise EstimationError(f"need at least 2 subjects in the {name} arm for a variance")
        out[f"mean_{name}"] = cols.mean(axis=1)
        out[f"var_{name}"] = cols.var(axis=1, ddof=1) / n
    out["difference"] = out["mean_treatment"] - out["mean_control"]
    out["var_difference"] = out["var_control"] + out["var_treatment"]
    return out


def pool_rubin(estimates: Sequence[tuple[float, float]], level: float = 0.95,
               com_df: Optional[float] = None) -> PooledEstimate:
    """Combine (point, variance) pairs from m imputation rounds.

    com_df is the complete-data degrees of freedom; None uses the classic
    large-sample Rubin df.
    """
    m = len(estimates)
    if m < 2:
        raise EstimationError("Rubin pooling needs at least 2 imputations")
    if not 0 < level < 1:
        raise EstimationError("confidence level must lie in (0, 1)")
    points = np.array([p for p, _ in estimates], dtype=float)
    variances = np.array([v for _, v in estimates], dtype=float)
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(variances))):
        raise EstimationError("pooling inputs must be finite")
    qbar = float(points.mean())
    w = float(variances.mean())
    b = float(points.var(ddof=1))
    t = w + (1.0 + 1.0 / m) * b

    if b > 0:
        df_old = (m - 1) * (1.0 + w / ((1.0 + 1.0 / m) * b)) ** 2
    else:
        df_old = math.inf
    if com_df is not None and math.isfinite(com_df):
        gamma = ((1.0 + 1.0 / m) * b / t) if t > 0 else 0.0
        df_obs = com_df * (com_df + 1.0) / (com_df + 3.0) * (1.0 - gamma)
        df = 1.0 / (1.0 / df_old + 1.0 / df_obs) if math.isfinite(df_old) else df_obs
    else:
        df = df_old

    half = float(stats.t.ppf((1.0 + level) / 2.0, df)) * math.sqrt(t) if t > 0 else 0.0
    return PooledEstimate(point=qbar, within=w, between=b, total=t, df=df, level=level,
                          ci_low=qbar - half, ci_high=qbar + half, m=m)


def coverage_indicator(pooled: PooledEstimate, truth: float) -> bool:
    """True iff the truth lies in the closed pooled interval."""
    return pooled.ci_low <= truth <= pooled.ci_high
