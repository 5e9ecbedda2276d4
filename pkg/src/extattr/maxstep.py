"""Per-cell generalized maximum-likelihood fits (the "Max" step).

Each grid cell is fit independently: the bivariate log likelihood over all
years plus the shape-regularization prior is maximized over the 7-vector of
transformed parameters, and the curvature at the optimum supplies a
Gaussian approximation ``N(eta_hat, Sigma_block)`` consumed by the Smooth
step. Optimization runs on the unconstrained scale, so no box constraints
are needed; support violations simply evaluate to -inf and are rejected by
the backtracking line search.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .exceptions import ConvergenceError, IngestionError, NumericalError
from .extremes import (
    CELL_PARAM_NAMES,
    CellParams,
    TimeIndex,
    bhr_loglik_terms,
    psi_log_prior,
    psi_log_prior_grad,
    shape_to_psi,
)

_FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)


@dataclass(frozen=True)
class CellSeries:
    """Paired annual maxima for one grid cell over a common time index."""

    cell_id: object
    time: TimeIndex
    y_cf: np.ndarray
    y_f: np.ndarray

    def __post_init__(self):
        y_cf = np.asarray(self.y_cf, dtype=float)
        y_f = np.asarray(self.y_f, dtype=float)
        if y_cf.shape != y_f.shape or y_cf.shape != self.time.years.shape:
            raise IngestionError(
                f"cell {self.cell_id}: series lengths do not match the time index")
        if not (np.all(np.isfinite(y_cf)) and np.all(np.isfinite(y_f))):
            raise IngestionError(f"cell {self.cell_id}: series contain non-finite values")
        object.__setattr__(self, "y_cf", y_cf)
        object.__setattr__(self, "y_f", y_f)

    def __len__(self):
        return self.y_cf.size


@dataclass
class CellFitDiagnostics:
    converged: bool
    n_restarts: int
    objective: float
    grad_norm: float
    hessian_repaired: bool
    message: str = ""


@dataclass
class MaxStepResult:
    """Stacked eta_hat and the block-diagonal likelihood covariance."""

    cell_ids: tuple
    time: TimeIndex
    eta_hat: np.ndarray            # (7N,)
    sigma_blocks: np.ndarray       # (N, 7, 7)
    converged: np.ndarray          # (N,) bool; False = flagged cell
    objectives: np.ndarray         # (N,)
    diagnostics: list

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    def eta_matrix(self) -> np.ndarray:
        return self.eta_hat.reshape(self.n_cells, 7)

    def precision_blocks(self) -> np.ndarray:
        """Per-cell likelihood precisions; zero blocks for flagged cells."""
        out = np.zeros_like(self.sigma_blocks)
        for i in range(self.n_cells):
            if self.converged[i]:
                out[i] = np.linalg.inv(self.sigma_blocks[i])
                out[i] = 0.5 * (out[i] + out[i].T)
        return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def cell_loglik(eta, series: CellSeries) -> float:
    """Generalized log likelihood: bivariate terms plus the psi regularizer."""
    ll, _ = cell_loglik_grad(eta, series)
    return ll


def cell_loglik_grad(eta, series: CellSeries):
    """Log likelihood and its analytic gradient w.r.t. the 7 parameters."""
    if isinstance(eta, CellParams):
        eta = eta.as_array()
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        return -np.inf, np.zeros(7)
    ll, grad = bhr_loglik_terms(eta, series.y_cf, series.y_f, series.time.t_star)
    if not np.isfinite(ll):
        return -np.inf, np.zeros(7)
    ll += psi_log_prior(eta[5])
    grad = grad.copy()
    grad[5] += psi_log_prior_grad(eta[5])
    return ll, grad


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _gev_pwm(x: np.ndarray):
    """Probability-weighted-moments GEV fit; returns (mu, sigma, xi)."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    j = np.arange(1, n + 1, dtype=float)
    b0 = x.mean()
    b1 = np.sum((j - 1) / (n - 1) * x) / n
    b2 = np.sum((j - 1) * (j - 2) / ((n - 1) * (n - 2)) * x) / n
    c = (2 * b1 - b0) / (3 * b2 - b0) - math.log(2) / math.log(3)
    k = 7.8590 * c + 2.9554 * c * c        # Hosking sign: k = -xi
    if abs(k) < 1e-6:
        sigma = (2 * b1 - b0) / math.log(2)
        mu = b0 - 0.5772156649015329 * sigma
        return mu, max(sigma, 1e-8), 0.0
    gam = math.exp(gammaln(1.0 + k))
    sigma = (2 * b1 - b0) * k / (gam * (1.0 - 2.0 ** (-k)))
    mu = b0 + sigma * (gam - 1.0) / k
    return mu, max(sigma, 1e-8), -k


def initial_params(series: CellSeries) -> np.ndarray:
    """Moment/regression-based seed for the optimizer.

    Per world: an OLS trend in t* seeds the location slope, and a PWM GEV
    fit of the detrended series seeds the intercept, scale, and shape. The
    shared scale/shape are averaged across worlds; dependence starts at
    lambda* = 0.
    """
    ts = series.time.t_star
    seeds = []
    for y in (series.y_cf, series.y_f):
        slope = float(np.cov(ts, y, ddof=1)[0, 1] / np.var(ts, ddof=1))
        mu, sigma, xi = _gev_pwm(y - slope * ts)
        seeds.append((mu, slope, sigma, xi))
    xi_bar = float(np.clip(0.5 * (seeds[0][3] + seeds[1][3]), -0.45, 0.45))
    sig_bar = 0.5 * (math.log(seeds[0][2]) + math.log(seeds[1][2]))
    return np.array([
        seeds[0][0], seeds[0][1], seeds[1][0], seeds[1][1],
        sig_bar, float(shape_to_psi(xi_bar)), 0.0,
    ])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _scaled_grad_norm(g, x):
    return float(np.max(np.abs(g) * np.maximum(1.0, np.abs(x))))


def _bfgs_backtracking(fun_grad, x0, max_iter=600, gtol=1e-7):
    """Minimize with BFGS + Armijo backtracking; -inf-safe and deterministic.

    ``fun_grad`` returns (value, gradient); +inf values are rejected by the
    line search. Returns (x, f, g, converged).
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f):
        return x, f, g, False
    h_inv = np.eye(x.size)
    stalls = 0
    for _ in range(max_iter):
        if _scaled_grad_norm(g, x) < gtol:
            return x, f, g, True
        p = -h_inv @ g
        slope = float(g @ p)
        if slope >= 0.0:
            h_inv = np.eye(x.size)
            p = -g
            slope = float(g @ p)
        step = 1.0
        accepted = False
        for _ in range(60):
            xt = x + step * p
            ft, gt = fun_grad(xt)
            if np.isfinite(ft) and ft <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return x, f, g, _scaled_grad_norm(g, x) < 100 * gtol
        # objective at the float plateau: hand off to the Newton polish
        stalls = stalls + 1 if f - ft <= 1e-12 * (1.0 + abs(f)) else 0
        s = xt - x
        yv = gt - g
        sy = float(s @ yv)
        if sy > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            rho = 1.0 / sy
            hy = h_inv @ yv
            h_inv = h_inv - rho * (np.outer(s, hy) + np.outer(hy, s)) \
                + rho * rho * float(yv @ hy) * np.outer(s, s) + rho * np.outer(s, s)
        x, f, g = xt, ft, gt
        if stalls >= 3:
            break
    return x, f, g, _scaled_grad_norm(g, x) < gtol


def _hessian_fd(grad_fun, x):
    """Central finite differences of the gradient; symmetrized."""
    n = x.size
    h = _FD_STEP * np.maximum(1.0, np.abs(x))
    hess = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h[j]
        gp = grad_fun(x + e)
        gm = grad_fun(x - e)
        hess[:, j] = (gp - gm) / (2.0 * h[j])
    return 0.5 * (hess + hess.T)


def _newton_polish(fun_grad, x, f, g, max_steps=8):
    """Drive the gradient below the Armijo plateau with damped Newton steps.

    Near the optimum the objective flattens to float resolution before the
    gradient does, so steps are accepted on gradient-norm decrease instead.
    """
    for _ in range(max_steps):
        gn = _scaled_grad_norm(g, x)
        if gn < 1e-9:
            break
        hess = _hessian_fd(lambda e: fun_grad(e)[1], x)
        try:
            dx = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            break
        improved = False
        for damp in (1.0, 0.5, 0.25, 0.05):
            xt = x + damp * dx
            ft, gt = fun_grad(xt)
            if np.isfinite(ft) and _scaled_grad_norm(gt, xt) < gn:
                x, f, g = xt, ft, gt
                improved = True
                break
        if not improved:
            break
    return x, f, g


def _feasible_seed(fun, eta0, max_tries=40):
    """Inflate the scale until the seed has finite likelihood."""
    eta = eta0.copy()
    for _ in range(max_tries):
        if np.isfinite(fun(eta)[0]):
            return eta
        eta[4] += 0.25
        eta[5] = 0.9 * eta[5] + 0.1 * float(shape_to_psi(-0.1))
    return eta


def fit_cell(series: CellSeries, init: CellParams | None = None, *,
             min_obs: int = 30, restarts: int = 5, seed: int = 0,
             gtol: float = 1e-7):
    """Fit one cell; returns (CellParams, 7x7 covariance block, diagnostics).

    The covariance is the inverse negative Hessian of the generalized log
    likelihood at the optimum, with the Hessian taken by central differences
    of the analytic gradient. A non-PD Hessian is repaired by eigenvalue
    clamping and flagged. Non-convergence after the jittered restart
    schedule raises ConvergenceError.
    """
    if len(series) < min_obs:
        raise IngestionError(
            f"cell {series.cell_id}: {len(series)} observations < floor {min_obs}")
    if np.std(series.y_cf) == 0.0 or np.std(series.y_f) == 0.0:
        raise ConvergenceError(f"cell {series.cell_id}: constant (zero-variance) series")

    def nll_grad(eta):
        ll, g = cell_loglik_grad(eta, series)
        return -ll, -g

    eta0 = init.as_array() if init is not None else initial_params(series)
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed) & 0xFFFFFFFF]))

    best = None
    attempts = 0
    for attempt in range(restarts + 1):
        attempts = attempt
        eta_s = eta0 if attempt == 0 else eta0 * (1.0 + 0.1 * rng.standard_normal(7))
        eta_s = _feasible_seed(nll_grad, np.asarray(eta_s, dtype=float))
        f0, _ = nll_grad(eta_s)
        if not np.isfinite(f0):
            continue
        # poor seed: a short derivative-free simplex before quasi-Newton
        x_probe = eta_s + 1e-3 * np.maximum(1.0, np.abs(eta_s))
        if not np.isfinite(nll_grad(x_probe)[0]):
            res = minimize(lambda e: nll_grad(e)[0], eta_s, method="Nelder-Mead",
                           options={"maxiter": 200, "xatol": 1e-6, "fatol": 1e-9})
            if np.isfinite(res.fun):
                eta_s = res.x
        x, f, g, _ = _bfgs_backtracking(nll_grad, eta_s, gtol=gtol)
        if np.isfinite(f):
            x, f, g = _newton_polish(nll_grad, x, f, g)
            ok = _scaled_grad_norm(g, x) < 1e-5
            if best is None or f < best[1]:
                best = (x, f, g, ok)
            if ok:
                break
    if best is None or not best[3]:
        raise ConvergenceError(
            f"cell {series.cell_id}: optimizer did not converge after "
            f"{attempts + 1} starts")

    x, f, g, _ = best
    hess = _hessian_fd(lambda e: cell_loglik_grad(e, series)[1], x)
    neg_hess = -hess
    evals, evecs = np.linalg.eigh(neg_hess)
    repaired = False
    if evals[0] <= 0.0:
        floor = 1e-8 * max(evals[-1], 1e-8)
        evals = np.maximum(evals, floor)
        neg_hess = evecs @ np.diag(evals) @ evecs.T
        repaired = True
    cov = evecs @ np.diag(1.0 / evals) @ evecs.T
    cov = 0.5 * (cov + cov.T)

    diag = CellFitDiagnostics(
        converged=True, n_restarts=attempts, objective=-f,
        grad_norm=_scaled_grad_norm(g, x), hessian_repaired=repaired)
    return CellParams.from_array(x), cov, diag


def _fit_cell_worker(args):
    series, min_obs, restarts, seed, gtol = args
    try:
        params, cov, diag = fit_cell(series, min_obs=min_obs, restarts=restarts,
                                     seed=seed, gtol=gtol)
        return params.as_array(), cov, diag
    except (ConvergenceError, NumericalError) as exc:
        diag = CellFitDiagnostics(converged=False, n_restarts=restarts,
                                  objective=math.nan, grad_norm=math.nan,
                                  hessian_repaired=False, message=str(exc))
        # zeros keep downstream algebra NaN-free; the flag marks the cell
        return np.zeros(7), np.eye(7), diag


def max_workers_cap(requested: int) -> int:
    cap = os.environ.get("EXTATTR_THREADS")
    if cap:
        return max(1, min(int(requested), int(cap)))
    return max(1, int(requested))


def run_max(panel: list, parallelism: int = 1, *, min_obs: int = 30,
            restarts: int = 5, seed: int = 0, gtol: float = 1e-7,
            max_flagged_frac: float = 0.2) -> MaxStepResult:
    """Fit every cell of the panel; deterministic for any worker count.

    Cells keep their input order and receive per-cell RNG streams derived
    from ``seed``, so results are bitwise identical across parallelism
    levels. Fails if more than ``max_flagged_frac`` of the cells flag.
    """
    if not panel:
        raise IngestionError("empty panel")
    t0 = panel[0].time
    for s in panel[1:]:
        if not np.array_equal(s.time.years, t0.years):
            raise IngestionError("all cells must share one time index")

    cell_seeds = [int(s.generate_state(1)[0]) for s in
                  np.random.SeedSequence(seed).spawn(len(panel))]
    jobs = [(series, min_obs, restarts, cell_seeds[i], gtol)
            for i, series in enumerate(panel)]
    workers = max_workers_cap(parallelism)
    if workers > 1 and len(panel) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_cell_worker, jobs, chunksize=1))
    else:
        results = [_fit_cell_worker(j) for j in jobs]

    n = len(panel)
    eta_hat = np.zeros(7 * n)
    sigma_blocks = np.zeros((n, 7, 7))
    converged = np.zeros(n, dtype=bool)
    objectives = np.full(n, np.nan)
    diags = []
    for i, (eta, cov, diag) in enumerate(results):
        eta_hat[7 * i:7 * i + 7] = eta
        sigma_blocks[i] = cov
        converged[i] = diag.converged
        objectives[i] = diag.objective
        diags.append(diag)

    n_flagged = int(np.sum(~converged))
    if n_flagged > max_flagged_frac * n:
        raise NumericalError(
            f"{n_flagged}/{n} cells failed to converge (> {max_flagged_frac:.0%})")
    return MaxStepResult(
        cell_ids=tuple(s.cell_id for s in panel), time=t0, eta_hat=eta_hat,
        sigma_blocks=sigma_blocks, converged=converged, objectives=objectives,
        diagnostics=diags)
