"""Outer credible regions for treatment-effect exceedance sets.

Constructs the smallest reported cell set that contains the true exceedance
set {g : delta(g) >= u} with posterior probability at least 1 - alpha,
controlling the family-wise error rate through the joint posterior draws
rather than cell-wise tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterDomainError


@dataclass
class HotspotResult:
    threshold: float
    alpha: float
    cell_ids: tuple
    statistic: np.ndarray       # per-cell T(s_g)
    critical_value: float
    in_region: np.ndarray       # bool, T >= critical value
    coverage_fraction: float
    degenerate: np.ndarray      # per-cell flag: all draws equal to u

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)


def test_statistic(delta: np.ndarray, u: float):
    """Cell-wise statistic (E[delta] - u) / sqrt(E[(delta - u)^2]).

    ``delta`` holds posterior draws along axis 0 and may carry a trailing
    cell axis. A cell whose draws all equal u exactly has an undefined
    statistic; it is reported as 0 with a flag.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape[0] < 2:
        raise ParameterDomainError("need at least two posterior draws")
    num = delta.mean(axis=0) - u
    den = np.sqrt(np.mean((delta - u) ** 2, axis=0))
    degenerate = den == 0.0
    t = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    return t, degenerate


def estimate_region(delta: np.ndarray, u: float, alpha: float,
                    cell_ids=None) -> HotspotResult:
    """Outer credible region from aligned joint posterior draws (B, N).

    Draw index must mean the same joint posterior sample in every cell;
    per-cell reordering of draws would destroy the joint exceedance sets.
    The critical value is the lower empirical alpha-quantile of the
    per-draw minima M^(b), with M^(b) = 0 for draws whose exceedance set is
    empty, and membership is decided with >= (ties included).
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterDomainError(f"alpha must lie in (0, 1), got {alpha}")
    delta = np.asarray(delta, dtype=float)
    if delta.ndim != 2:
        raise ParameterDomainError("expected a (draws, cells) array")
    n_draws, n_cells = delta.shape
    if cell_ids is None:
        cell_ids = tuple(range(n_cells))

    t, degenerate = test_statistic(delta, u)
    exceed = delta >= u
    masked = np.where(exceed, t[None, :], np.inf)
    m = masked.min(axis=1)
    m = np.where(np.isposinf(m), 0.0, m)       # empty exceedance set

    # lower empirical quantile: the ceil(alpha * B)-th order statistic
    k = int(np.ceil(alpha * n_draws))
    k = min(max(k, 1), n_draws)
    c_alpha = float(np.sort(m)[k - 1])

    in_region = t >= c_alpha
    return HotspotResult(threshold=float(u), alpha=float(alpha),
                         cell_ids=tuple(cell_ids), statistic=t,
                         critical_value=c_alpha, in_region=in_region,
                         coverage_fraction=float(np.mean(in_region)),
                         degenerate=degenerate)
