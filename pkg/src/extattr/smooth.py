"""Gibbs sampling on the Gaussian-Gaussian pseudo-model (the "Smooth" step).

The Max step's Gaussian likelihood approximation N(eta_hat, Sigma_eta_hat)
combines with the intrinsic-CAR latent prior into closed-form full
conditionals for eta, gamma, and Sigma; no Metropolis-Hastings anywhere.

The 7N-dimensional eta draw uses a sparse (banded) Cholesky: a
bandwidth-reducing cell permutation and the banded scatter pattern are
computed once, and only the numeric values are refactorized per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import (
    cho_factor,
    cho_solve,
    cho_solve_banded,
    cholesky_banded,
    solve_banded,
    solve_triangular,
)
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .exceptions import ConfigError, NumericalError
from .lattice import DesignMatrix, GridGraph
from .maxstep import MaxStepResult


@dataclass(frozen=True)
class Hyperpriors:
    """Weakly-informative hyperpriors for the latent layer."""

    sigma2_gamma: float = 100.0**2
    nu: float = 0.1
    psi_scale: float = 0.1

    def psi_matrix(self) -> np.ndarray:
        return self.psi_scale * np.eye(7)


@dataclass(frozen=True)
class GibbsSchedule:
    iterations: int = 60000
    burnin: int = 10000
    thin: int = 5

    def __post_init__(self):
        if self.iterations <= 0 or self.burnin < 0 or self.thin <= 0:
            raise ConfigError("schedule entries must be positive (burn-in may be 0)")
        kept = self.iterations - self.burnin
        if kept <= 0 or kept % self.thin != 0:
            raise ConfigError(
                f"(iterations - burnin) = {kept} must be a positive multiple of thin = {self.thin}")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burnin) // self.thin


@dataclass
class ChainState:
    eta: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    iteration: int = 0
    chain_id: int = 0


@dataclass
class PosteriorDraws:
    """Thinned draws of one chain plus its schedule/seed metadata."""

    chain_id: int
    schedule: GibbsSchedule
    seed: int
    cell_ids: tuple
    years: np.ndarray
    eta: np.ndarray      # (B, 7N)
    gamma: np.ndarray    # (B, 7q)
    sigma: np.ndarray    # (B, 7, 7)

    @property
    def n_draws(self) -> int:
        return self.eta.shape[0]


class GibbsKernel:
    """Precomputed sparse structure shared by the three conditional updates.

    ``permutation`` overrides the fill-reducing cell order (identity or any
    permutation array); by default reverse Cuthill-McKee is used to minimize
    the banded factor's bandwidth.
    """

    def __init__(self, max_result: MaxStepResult, design: DesignMatrix,
                 graph: GridGraph, hyper: Hyperpriors, permutation=None):
        self.hyper = hyper
        self.n_cells = graph.n_cells
        self.q = design.n_covariates
        n = self.n_cells

        lap = graph.laplacian().tocsr()
        self.lap = lap
        self.prec_blocks = max_result.precision_blocks()     # zero rows for flagged cells
        self.eta_hat = max_result.eta_hat
        # likelihood part of the linear term, Sigma_eta_hat^{-1} eta_hat
        self.lik_b = np.einsum("nij,nj->ni", self.prec_blocks,
                               max_result.eta_matrix()).reshape(-1)

        # covariate matrix recovered from the design's block structure
        self.C = np.asarray(design.X[0::7, 0:self.q].todense())
        self.CtAC = self.C.T @ (lap @ self.C)
        self.CtC = self.C.T @ self.C

        if permutation is None:
            permutation = np.asarray(reverse_cuthill_mckee(lap, symmetric_mode=True))
        self.perm = np.asarray(permutation, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ConfigError("permutation must be a permutation of the cell indices")
        self.iperm = np.empty(n, dtype=np.int64)
        self.iperm[self.perm] = np.arange(n)
        self.perm7 = (7 * self.perm[:, None] + np.arange(7)).reshape(-1)
        self.iperm7 = (7 * self.iperm[:, None] + np.arange(7)).reshape(-1)

        lap_p = lap[self.perm][:, self.perm].tocoo()
        off = lap_p.row > lap_p.col
        self.off_rows = lap_p.row[off]
        self.off_cols = lap_p.col[off]
        self.off_vals = lap_p.data[off].astype(float)
        self.diag_vals = lap_p.diagonal()

        bw_cells = int(np.max(self.off_rows - self.off_cols)) if self.off_rows.size else 0
        self.bw = 7 * (bw_cells + 1) - 1

        # flat indices into the (bw+1, 7n) lower-banded array: ab[i-j, j] = P[i,j]
        r, c = np.tril_indices(7)
        self._tril_r, self._tril_c = r, c
        bi = self.off_rows[:, None, None]
        bj = self.off_cols[:, None, None]
        rr = np.arange(7)[None, :, None]
        cc = np.arange(7)[None, None, :]
        i_off = 7 * bi + rr
        j_off = 7 * bj + cc
        self._idx_off = ((i_off - j_off) * (7 * n) + j_off).reshape(-1)
        bd = np.arange(n)[:, None]
        i_d = 7 * bd + r[None, :]
        j_d = 7 * bd + c[None, :]
        self._idx_diag = ((i_d - j_d) * (7 * n) + j_d).reshape(-1)

        self._prec_perm = self.prec_blocks[self.perm]

    # -- eta ---------------------------------------------------------------

    def _assemble_banded(self, sigma_inv: np.ndarray) -> np.ndarray:
        n = self.n_cells
        ab = np.zeros((self.bw + 1, 7 * n))
        diag_blocks = self.diag_vals[:, None, None] * sigma_inv + self._prec_perm
        ab.ravel()[self._idx_diag] = diag_blocks[:, self._tril_r, self._tril_c].reshape(-1)
        if self.off_vals.size:
            off_blocks = self.off_vals[:, None, None] * sigma_inv
            ab.ravel()[self._idx_off] = off_blocks.reshape(-1)
        return ab

    def eta_linear_term(self, gamma: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
        """Sigma_eta_hat^{-1} eta_hat + [(D-W) (x) Sigma^{-1}] X gamma."""
        xg = (self.C @ gamma.reshape(7, self.q).T)            # (n, 7)
        prior_term = (self.lap @ xg) @ sigma_inv
        return self.lik_b + prior_term.reshape(-1)

    def sample_eta(self, gamma: np.ndarray, sigma: np.ndarray, rng,
                   iteration: int = -1) -> np.ndarray:
        sigma_inv = _sym_inv(sigma, iteration)
        ab = self._assemble_banded(sigma_inv)
        try:
            cb = cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"eta-conditional Cholesky failed at iteration {iteration}") from exc
        b = self.eta_linear_term(gamma, sigma_inv)[self.perm7]
        mean = cho_solve_banded((cb, True), b)
        z = rng.standard_normal(b.size)
        # solve L^T x = z via the upper-banded transpose of the factor
        ab_up = np.zeros_like(cb)
        npts = b.size
        for k in range(self.bw + 1):
            ab_up[self.bw - k, k:] = cb[k, :npts - k]
        x = solve_banded((0, self.bw), ab_up, z)
        return (mean + x)[self.iperm7]

    # -- gamma ---------------------------------------------------------------

    def gamma_moments(self, eta: np.ndarray, sigma: np.ndarray, iteration: int = -1):
        """Posterior precision and mean of the coefficient conditional."""
        sigma_inv = _sym_inv(sigma, iteration)
        prec = np.kron(sigma_inv, self.CtAC) + np.eye(7 * self.q) / self.hyper.sigma2_gamma
        h = eta.reshape(self.n_cells, 7)
        m = self.C.T @ (self.lap @ h)                          # (q, 7)
        rhs = (sigma_inv @ m.T).reshape(-1)
        return prec, rhs

    def sample_gamma(self, eta: np.ndarray, sigma: np.ndarray, rng,
                     iteration: int = -1) -> np.ndarray:
        prec, rhs = self.gamma_moments(eta, sigma, iteration)
        try:
            low = cho_factor(prec, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"gamma-conditional Cholesky failed at iteration {iteration}") from exc
        mean = cho_solve(low, rhs)
        z = rng.standard_normal(rhs.size)
        x = solve_triangular(low[0], z, lower=True, trans="T")
        return mean + x

    # -- Sigma ---------------------------------------------------------------

    def sigma_posterior_params(self, eta: np.ndarray, gamma: np.ndarray):
        resid = eta - (self.C @ gamma.reshape(7, self.q).T).reshape(-1)
        v = resid.reshape(self.n_cells, 7)
        psi_post = v.T @ (self.lap @ v) + self.hyper.psi_matrix()
        nu_post = self.hyper.nu + self.n_cells
        return nu_post, 0.5 * (psi_post + psi_post.T)

    def sample_sigma(self, eta: np.ndarray, gamma: np.ndarray, rng,
                     iteration: int = -1) -> np.ndarray:
        nu_post, psi_post = self.sigma_posterior_params(eta, gamma)
        if nu_post <= 8.0:
            raise NumericalError(
                f"inverse-Wishart degrees of freedom nu_post = {nu_post} <= 8; "
                "too few cells for a proper conditional")
        return _inverse_wishart(nu_post, psi_post, rng, iteration)


def _sym_inv(sigma: np.ndarray, iteration: int = -1) -> np.ndarray:
    try:
        low = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"cross-component covariance not PD at iteration {iteration}") from exc
    inv = cho_solve(low, np.eye(sigma.shape[0]))
    return 0.5 * (inv + inv.T)


def _inverse_wishart(nu: float, psi: np.ndarray, rng, iteration: int = -1) -> np.ndarray:
    """Draw Sigma ~ IW(nu, psi) by a Bartlett decomposition of Sigma^{-1}."""
    p = psi.shape[0]
    try:
        s = _sym_inv(psi, iteration)
        l_s = np.linalg.cholesky(s)
    except (np.linalg.LinAlgError, NumericalError) as exc:
        raise NumericalError(
            f"inverse-Wishart scale not PD at iteration {iteration}") from exc
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = np.sqrt(rng.chisquare(nu - i))
    a[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    w = l_s @ a
    wish = w @ w.T                     # Sigma^{-1} ~ Wishart(nu, psi^{-1})
    sigma = _sym_inv(wish, iteration)
    return sigma


# ---------------------------------------------------------------------------
# spec-level update operations
# ---------------------------------------------------------------------------


def update_eta(state: ChainState, kernel: GibbsKernel, rng) -> np.ndarray:
    return kernel.sample_eta(state.gamma, state.sigma, rng, state.iteration)


def update_gamma(state: ChainState, kernel: GibbsKernel, rng) -> np.ndarray:
    return kernel.sample_gamma(state.eta, state.sigma, rng, state.iteration)


def update_sigma(state: ChainState, kernel: GibbsKernel, rng) -> np.ndarray:
    return kernel.sample_sigma(state.eta, state.gamma, rng, state.iteration)


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


def initial_state(kernel: GibbsKernel, max_result: MaxStepResult,
                  chain_id: int, rng) -> ChainState:
    """Overdispersed initialization: chain 0 at the Max-step estimates,
    further chains jittered by twice the Max-step standard errors."""
    eta0 = max_result.eta_hat.copy()
    se = np.sqrt(np.maximum(np.einsum("nii->ni", max_result.sigma_blocks), 0.0)).reshape(-1)
    se[~np.repeat(max_result.converged, 7)] = 1.0
    if chain_id > 0:
        eta0 = eta0 + 2.0 * se * rng.standard_normal(eta0.size)

    q = kernel.q
    xtx = np.kron(np.eye(7), kernel.CtC) + np.eye(7 * q) / kernel.hyper.sigma2_gamma
    h = eta0.reshape(kernel.n_cells, 7)
    gamma0 = np.linalg.solve(xtx, (kernel.C.T @ h).T.reshape(-1))

    edges = sp.triu(-sp.csr_matrix(kernel.lap), k=1).tocoo()
    sigma0 = np.zeros((7, 7))
    h_hat = max_result.eta_matrix()
    n_edges = 0
    for i, j, w in zip(edges.row, edges.col, edges.data):
        if w != 0:
            d = h_hat[i] - h_hat[j]
            sigma0 += 0.5 * np.outer(d, d)
            n_edges += 1
    if n_edges:
        sigma0 /= n_edges
    sigma0 += 1e-4 * np.eye(7) * max(np.trace(sigma0) / 7.0, 1.0)
    return ChainState(eta=eta0, gamma=gamma0, sigma=sigma0, iteration=0, chain_id=chain_id)


def run_chain(kernel: GibbsKernel, max_result: MaxStepResult,
              schedule: GibbsSchedule, chain_id: int, stream, seed: int) -> PosteriorDraws:
    rng = np.random.default_rng(stream)
    state = initial_state(kernel, max_result, chain_id, rng)
    n = kernel.n_cells
    b = schedule.n_retained
    eta_draws = np.empty((b, 7 * n))
    gamma_draws = np.empty((b, 7 * kernel.q))
    sigma_draws = np.empty((b, 7, 7))
    k = 0
    for it in range(1, schedule.iterations + 1):
        state.iteration = it
        state.eta = update_eta(state, kernel, rng)
        state.gamma = update_gamma(state, kernel, rng)
        state.sigma = update_sigma(state, kernel, rng)
        if it > schedule.burnin and (it - schedule.burnin) % schedule.thin == 0:
            eta_draws[k] = state.eta
            gamma_draws[k] = state.gamma
            sigma_draws[k] = state.sigma
            k += 1
    assert k == b
    return PosteriorDraws(chain_id=chain_id, schedule=schedule, seed=seed,
                          cell_ids=max_result.cell_ids, years=max_result.time.years,
                          eta=eta_draws, gamma=gamma_draws, sigma=sigma_draws)


def run_gibbs(max_result: MaxStepResult, design: DesignMatrix, graph: GridGraph,
              hyper: Hyperpriors, schedule: GibbsSchedule, n_chains: int = 2,
              seed: int = 0) -> list:
    """Run independent chains with RNG streams split from the root seed."""
    kernel = GibbsKernel(max_result, design, graph, hyper)
    streams = np.random.SeedSequence(seed).spawn(n_chains)
    return [run_chain(kernel, max_result, schedule, c, streams[c], seed)
            for c in range(n_chains)]
