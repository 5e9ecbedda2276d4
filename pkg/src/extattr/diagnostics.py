"""MCMC quality metrics and exploratory dependence statistics.

Chain metrics: Geweke's z (window means compared with spectral standard
errors), the Gelman-Rubin potential scale reduction factor, and Geyer-
truncated effective sample sizes. Dependence EDA: the empirical chi
measure at a fixed quantile level and the classical semivariogram, both
binned by centroid distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterDomainError


@dataclass
class ChainDiagnostics:
    """Per-parameter summary across all chains of a run."""

    names: tuple
    geweke_z: np.ndarray
    rhat: np.ndarray
    ess: np.ndarray
    flagged: np.ndarray     # any undefined statistic (zero-variance chains)


def _autocov(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased autocovariances gamma_0..gamma_max_lag via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xd = x - x.mean()
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xd, m)
    acov = np.fft.irfft(f * np.conjugate(f), m)[: max_lag + 1].real / n
    return acov


def _spectral_variance(x: np.ndarray) -> float:
    """Spectral density at zero over n, via a 4%-lag Bartlett window."""
    n = x.size
    k = max(1, int(0.04 * n))
    acov = _autocov(x, k)
    weights = 1.0 - np.arange(1, k + 1) / (k + 1.0)
    s0 = acov[0] + 2.0 * float(weights @ acov[1:])
    return max(s0, 0.0) / n


def geweke_z(chain, frac_a: float = 0.1, frac_b: float = 0.5) -> float:
    """Z-score comparing the means of the first and last chain windows.

    |z| below 1.96 is consistent with a converged chain. Returns NaN for a
    zero-variance chain (undefined statistic).
    """
    chain = np.asarray(chain, dtype=float)
    if chain.size < 100:
        raise ParameterDomainError("need a chain of length >= 100")
    if not 0.0 < frac_a < 1.0 or not 0.0 < frac_b < 1.0 or frac_a + frac_b > 1.0:
        raise ParameterDomainError("window fractions must be positive and non-overlapping")
    if np.var(chain) == 0.0:
        return math.nan
    n = chain.size
    a = chain[: int(frac_a * n)]
    b = chain[n - int(frac_b * n):]
    va = _spectral_variance(a)
    vb = _spectral_variance(b)
    if va + vb == 0.0:
        return math.nan
    return float((a.mean() - b.mean()) / math.sqrt(va + vb))


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor from between/within-chain variances.

    Uses the conservative pooled-variance form V = W + B/n, so identical
    chains give exactly 1 and the statistic never drops below 1.
    """
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 2:
        raise ParameterDomainError("need at least two chains")
    n = chains[0].size
    if n < 100 or any(c.size != n for c in chains):
        raise ParameterDomainError("chains must have equal lengths >= 100")
    w = float(np.mean([np.var(c, ddof=1) for c in chains]))
    b_over_n = float(np.var([c.mean() for c in chains], ddof=1))
    if w == 0.0:
        return 1.0 if b_over_n == 0.0 else math.inf
    return math.sqrt((w + b_over_n) / w)


def effective_sample_size(chain) -> float:
    """IID-equivalent sample count N / (1 + 2 sum rho_k).

    Autocorrelations are summed by Geyer pairs until the first negative
    paired sum. Antithetic chains can legitimately exceed N; the value is
    kept finite by capping at N log10(N). Returns NaN for zero variance.
    """
    chain = np.asarray(chain, dtype=float)
    n = chain.size
    if n < 100:
        raise ParameterDomainError("need a chain of length >= 100")
    acov = _autocov(chain, n - 1)
    if acov[0] == 0.0:
        return math.nan
    rho = acov / acov[0]
    tau = -1.0
    t = 0
    prev = math.inf
    while 2 * t + 1 < n:
        pair = rho[2 * t] + rho[2 * t + 1]
        if pair < 0.0:
            break
        # Geyer's monotone refinement damps noise bumps in the pair sums
        prev = min(prev, pair)
        tau += 2.0 * prev
        t += 1
    cap = n * math.log10(max(n, 10))
    if tau <= 0.0:
        return cap
    return float(min(n / tau, cap))


def summarize_chains(chains: np.ndarray, names=None) -> ChainDiagnostics:
    """Diagnostics for an (n_chains, n_draws, n_params) array of draws.

    Geweke is evaluated on the concatenation-free first chain convention:
    each chain's z is computed and the largest-|z| one reported; ESS sums
    per-chain values capped at the total draw count.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[None, ...]
    n_chains, n_draws, n_params = chains.shape
    if names is None:
        names = tuple(f"p{k}" for k in range(n_params))
    z = np.empty(n_params)
    rhat = np.empty(n_params)
    ess = np.empty(n_params)
    flagged = np.zeros(n_params, dtype=bool)
    for k in range(n_params):
        zs = [geweke_z(chains[c, :, k]) for c in range(n_chains)]
        z[k] = zs[int(np.argmax([abs(v) if not math.isnan(v) else math.inf for v in zs]))]
        rhat[k] = gelman_rubin(chains[:, :, k]) if n_chains > 1 else math.nan
        es = [effective_sample_size(chains[c, :, k]) for c in range(n_chains)]
        ess[k] = min(float(np.nansum(es)), float(n_chains * n_draws))
        flagged[k] = any(math.isnan(v) for v in zs + es)
    return ChainDiagnostics(names=tuple(names), geweke_z=z, rhat=rhat, ess=ess,
                            flagged=flagged)


# ---------------------------------------------------------------------------
# dependence EDA
# ---------------------------------------------------------------------------


def _pair_distances(centroids: np.ndarray):
    d = centroids[:, None, :] - centroids[None, :, :]
    return np.sqrt(np.sum(d * d, axis=-1))


def empirical_chi(values: np.ndarray, centroids: np.ndarray, u: float = 0.95,
                  bins=None):
    """Distance-binned empirical tail dependence at quantile level u.

    ``values`` is (n_cells, n_times). For each cell pair the statistic is
    the joint exceedance count over the average marginal exceedance count,
    with per-cell empirical u-quantiles (order statistics, strict
    exceedance), making it invariant to monotone marginal transforms.
    Returns (mean distance per bin, mean chi per bin); empty bins are
    omitted.
    """
    values = np.asarray(values, dtype=float)
    n_cells, n_t = values.shape
    if n_cells < 2:
        raise ParameterDomainError("need at least two cells")
    if not 0.0 < u < 1.0:
        raise ParameterDomainError("quantile level u must lie in (0, 1)")
    k = min(max(int(np.ceil(u * n_t)), 1), n_t - 1)
    thresh = np.sort(values, axis=1)[:, k - 1]
    exceed = values > thresh[:, None]
    counts = exceed.sum(axis=1).astype(float)

    both = (exceed.astype(np.int32) @ exceed.astype(np.int32).T).astype(float)
    denom = 0.5 * (counts[:, None] + counts[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        chi = np.where(denom > 0, both / denom, np.nan)

    dist = _pair_distances(np.asarray(centroids, dtype=float))
    iu, ju = np.triu_indices(n_cells, k=1)
    return _bin_pairs(dist[iu, ju], chi[iu, ju], bins)


def empirical_variogram(values: np.ndarray, centroids: np.ndarray, bins=None):
    """Classical semivariogram of a per-cell field, binned by distance."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ParameterDomainError("need a one-dimensional field over >= 2 cells")
    dist = _pair_distances(np.asarray(centroids, dtype=float))
    iu, ju = np.triu_indices(values.size, k=1)
    semivar = 0.5 * (values[iu] - values[ju]) ** 2
    return _bin_pairs(dist[iu, ju], semivar, bins)


def _bin_pairs(distances: np.ndarray, stats: np.ndarray, bins):
    ok = ~np.isnan(stats)
    distances, stats = distances[ok], stats[ok]
    if bins is None:
        # equal-count bins keep per-bin noise comparable
        bins = np.quantile(distances, np.linspace(0.0, 1.0, 11))
        bins[-1] *= 1 + 1e-9
    bins = np.asarray(bins, dtype=float)
    idx = np.digitize(distances, bins) - 1
    out_d, out_s = [], []
    for b in range(bins.size - 1):
        mask = idx == b
        if np.any(mask):
            out_d.append(float(distances[mask].mean()))
            out_s.append(float(stats[mask].mean()))
    return np.asarray(out_d), np.asarray(out_s)
