"""Return-level treatment effects and trend functionals of the posterior.

The effect of forcing on the p-year event at a cell reduces to a location
difference because scale and shape are shared across worlds:

    delta_t = (beta0 - alpha0) + t* (beta1 - alpha1),

independent of p. Summaries average t* over a requested year range using
the full-period standardization, and everything is computed per posterior
draw before summarizing, never by plugging in posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterDomainError
from .extremes import TimeIndex

DEFAULT_QUANTILES = (0.05, 0.5, 0.95)


@dataclass
class CausalSummary:
    """Per-cell posterior summaries of a scalar functional."""

    cell_ids: tuple
    period: str
    mean: np.ndarray
    sd: np.ndarray
    quantile_levels: tuple
    quantiles: np.ndarray      # (n_levels, n_cells)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)


def _slot(eta_draws: np.ndarray, k: int) -> np.ndarray:
    """Slice one of the seven parameter slots out of stacked eta draws."""
    return eta_draws[:, k::7]


def delta_draws(eta_draws: np.ndarray, time: TimeIndex,
                start_year: int, end_year: int) -> np.ndarray:
    """Per-draw, per-cell treatment effect averaged over a year range."""
    if end_year < start_year:
        raise ParameterDomainError("empty period: end year precedes start year")
    tbar = time.t_star_mean(start_year, end_year)
    return (_slot(eta_draws, 2) - _slot(eta_draws, 0)) \
        + tbar * (_slot(eta_draws, 3) - _slot(eta_draws, 1))


def prte_draw(cell_eta_draws: np.ndarray, time: TimeIndex,
              start_year: int, end_year: int) -> np.ndarray:
    """Treatment-effect draws for a single cell's (B, 7) parameter draws."""
    cell_eta_draws = np.asarray(cell_eta_draws, dtype=float)
    if cell_eta_draws.ndim != 2 or cell_eta_draws.shape[1] != 7:
        raise ParameterDomainError("expected draws of the 7-parameter cell vector")
    return delta_draws(cell_eta_draws.reshape(cell_eta_draws.shape[0], 7),
                       time, start_year, end_year)[:, 0]


def summarize(draws: np.ndarray, cell_ids, period: str,
              quantile_levels=DEFAULT_QUANTILES) -> CausalSummary:
    """Posterior mean/sd/quantiles of per-cell draws (B, N)."""
    draws = np.asarray(draws, dtype=float)
    qs = np.quantile(draws, quantile_levels, axis=0)
    return CausalSummary(cell_ids=tuple(cell_ids), period=period,
                         mean=draws.mean(axis=0), sd=draws.std(axis=0, ddof=1),
                         quantile_levels=tuple(quantile_levels), quantiles=qs)


def causal_summary(eta_draws: np.ndarray, time: TimeIndex, cell_ids,
                   start_year: int, end_year: int,
                   quantile_levels=DEFAULT_QUANTILES) -> CausalSummary:
    d = delta_draws(eta_draws, time, start_year, end_year)
    return summarize(d, cell_ids, f"{start_year}-{end_year}", quantile_levels)


def trend_draws(eta_draws: np.ndarray, time: TimeIndex, world: str) -> np.ndarray:
    """Per-draw slopes in data units per *year* for one world or their difference.

    Slopes are modeled per t*-unit; dividing by the year sd of the
    standardization converts to per-year units.
    """
    if world == "factual":
        s = _slot(eta_draws, 3)
    elif world == "counterfactual":
        s = _slot(eta_draws, 1)
    elif world == "difference":
        s = _slot(eta_draws, 3) - _slot(eta_draws, 1)
    else:
        raise ParameterDomainError(
            f"world must be factual, counterfactual, or difference; got {world!r}")
    return s / time.year_sd


def trend_summary(eta_draws: np.ndarray, time: TimeIndex, cell_ids, world: str,
                  quantile_levels=DEFAULT_QUANTILES) -> CausalSummary:
    d = trend_draws(eta_draws, time, world)
    return summarize(d, cell_ids, f"trend-{world}", quantile_levels)
