"""Grid geometry, adjacency, covariates, and the stacked design matrix.

The latent layer lives on an areal graph: ``W`` is the binary adjacency of
grid cells, ``D`` its degree matrix, and the intrinsic prior precision is
the graph Laplacian ``D - W`` coupled with a 7x7 cross-component matrix
through a Kronecker product that is never materialized densely.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .exceptions import IngestionError

N_PARAMS = 7

#: covariate column order: intercept first, then the four geographic columns
COVARIATE_COLUMNS = ("intercept", "lat", "lon", "elev_m", "seadist_km")


@dataclass(frozen=True)
class GridGraph:
    """Cell identifiers, centroids, adjacency W, degrees D."""

    cell_ids: tuple
    lon: np.ndarray
    lat: np.ndarray
    W: sp.csr_matrix
    degrees: np.ndarray
    n_components: int
    component_labels: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    def laplacian(self) -> sp.csr_matrix:
        """The singular prior precision D - W (one null vector per component)."""
        return (sp.diags(self.degrees.astype(float)) - self.W).tocsr()

    def edges(self) -> np.ndarray:
        """Undirected edge list as an (n_edges, 2) index array with i < j."""
        coo = sp.triu(self.W, k=1).tocoo()
        return np.column_stack([coo.row, coo.col])


@dataclass(frozen=True)
class CovariateTable:
    """Per-cell geographic covariates plus the intercept column.

    ``values`` has one row per cell in graph order and columns in
    COVARIATE_COLUMNS order.
    """

    cell_ids: tuple
    values: np.ndarray

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_columns(cls, cell_ids, lon, lat, elev_m, seadist_km) -> "CovariateTable":
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        elev = np.asarray(elev_m, dtype=float)
        sea = np.asarray(seadist_km, dtype=float)
        n = len(cell_ids)
        if not (lon.shape == lat.shape == elev.shape == sea.shape == (n,)):
            raise IngestionError("covariate columns must align with the cell list")
        vals = np.column_stack([np.ones(n), lat, lon, elev, sea])
        if not np.all(np.isfinite(vals)):
            raise IngestionError("covariate table contains missing or non-finite values")
        return cls(cell_ids=tuple(cell_ids), values=vals)

    def zscored(self) -> "CovariateTable":
        """Optionally condition the regression by z-scoring non-intercept columns."""
        vals = self.values.copy()
        for j in range(1, vals.shape[1]):
            s = vals[:, j].std()
            if s > 0:
                vals[:, j] = (vals[:, j] - vals[:, j].mean()) / s
        return CovariateTable(cell_ids=self.cell_ids, values=vals)


@dataclass(frozen=True)
class DesignMatrix:
    """Sparse X of shape (7N, 7q) built block-row-wise as X_i = I_7 (x) x_i'.

    The eta stacking is cell-major with the seven parameter slots in
    CELL_PARAM_NAMES order; gamma stacks the q coefficients of slot 0, then
    slot 1, and so on.
    """

    X: sp.csr_matrix
    n_cells: int
    n_covariates: int

    @property
    def shape(self):
        return self.X.shape

    def matvec(self, gamma: np.ndarray) -> np.ndarray:
        return self.X @ gamma

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.X.T @ v


@dataclass(frozen=True)
class KroneckerPrecision:
    """Implicit (D - W) (x) Sigma^{-1}; only Kronecker-identity products.

    ``graph_part`` is any symmetric sparse N x N matrix (usually the
    Laplacian) and ``comp_inv`` the dense 7x7 component precision.
    """

    graph_part: sp.csr_matrix
    comp_inv: np.ndarray

    def matvec(self, v: np.ndarray) -> np.ndarray:
        n = self.graph_part.shape[0]
        k = self.comp_inv.shape[0]
        V = v.reshape(n, k)
        return np.asarray(self.graph_part @ V @ self.comp_inv).reshape(-1)

    def quadform(self, v: np.ndarray) -> float:
        n = self.graph_part.shape[0]
        k = self.comp_inv.shape[0]
        V = v.reshape(n, k)
        return float(np.sum(V * (self.graph_part @ V @ self.comp_inv)))


def build_graph(cell_ids, lon, lat, resolution: float, queen: bool = False,
                edges=None) -> GridGraph:
    """Build the cell adjacency graph from centroids on a regular lattice.

    Cells sharing an edge are neighbors (rook); ``queen=True`` also joins
    diagonal contacts. An explicit ``edges`` list of (cell_a, cell_b) pairs
    overrides the lattice rule entirely.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    n = len(cell_ids)
    if lon.shape != (n,) or lat.shape != (n,):
        raise IngestionError("centroid arrays must align with the cell list")

    index = {cid: k for k, cid in enumerate(cell_ids)}
    if len(index) != n:
        raise IngestionError("duplicate cell identifiers")

    rows, cols = [], []
    if edges is not None:
        for a, b in edges:
            if a not in index or b not in index:
                raise IngestionError(f"edge references unknown cell: ({a}, {b})")
            ia, ib = index[a], index[b]
            if ia == ib:
                continue
            rows += [ia, ib]
            cols += [ib, ia]
    else:
        ii = np.rint(lon / resolution).astype(np.int64)
        jj = np.rint(lat / resolution).astype(np.int64)
        pos = {}
        for k in range(n):
            key = (int(ii[k]), int(jj[k]))
            if key in pos:
                raise IngestionError(
                    f"duplicate centroid at lattice position {key}: cells "
                    f"{cell_ids[pos[key]]} and {cell_ids[k]}")
            pos[key] = k
        offsets = [(1, 0), (0, 1)]
        if queen:
            offsets += [(1, 1), (1, -1)]
        for (i, j), k in pos.items():
            for di, dj in offsets:
                other = pos.get((i + di, j + dj))
                if other is not None:
                    rows += [k, other]
                    cols += [other, k]

    data = np.ones(len(rows), dtype=np.int8)
    W = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    W.data[:] = 1  # collapse any duplicate edge rows
    W = ((W + W.T) > 0).astype(np.int8).tocsr()
    W.setdiag(0)
    W.eliminate_zeros()

    degrees = np.asarray(W.sum(axis=1)).ravel().astype(np.int64)
    if np.any(degrees == 0):
        isolated = [cell_ids[k] for k in np.flatnonzero(degrees == 0)]
        warnings.warn(
            f"{len(isolated)} isolated cell(s) with no neighbors (e.g. {isolated[0]}); "
            "they receive no prior smoothing", stacklevel=2)
    n_comp, labels = connected_components(W, directed=False)
    return GridGraph(cell_ids=tuple(cell_ids), lon=lon, lat=lat, W=W,
                     degrees=degrees, n_components=int(n_comp),
                     component_labels=labels)


def build_design(graph: GridGraph, cov: CovariateTable) -> DesignMatrix:
    """Assemble the sparse (7N, 7q) design from per-cell covariate rows."""
    if cov.cell_ids != graph.cell_ids:
        raise IngestionError("covariate rows do not align with the graph cell order")
    n = graph.n_cells
    q = cov.n_covariates
    # row (7i + k) carries x_i' in columns [k*q, (k+1)*q)
    i_idx = np.repeat(np.arange(n), N_PARAMS * q)
    k_idx = np.tile(np.repeat(np.arange(N_PARAMS), q), n)
    j_idx = np.tile(np.arange(q), N_PARAMS * n)
    rows = N_PARAMS * i_idx + k_idx
    cols = q * k_idx + j_idx
    vals = cov.values[i_idx, j_idx]
    X = sp.csr_matrix((vals, (rows, cols)), shape=(N_PARAMS * n, N_PARAMS * q))
    return DesignMatrix(X=X, n_cells=n, n_covariates=q)


def make_lattice(n_x: int, n_y: int, resolution: float = 1.0,
                 lon0: float = 0.0, lat0: float = 0.0):
    """Cell ids and centroid arrays for a full n_x-by-n_y lattice."""
    ids, lon, lat = [], [], []
    for j in range(n_y):
        for i in range(n_x):
            ids.append(f"c{i:03d}_{j:03d}")
            lon.append(lon0 + i * resolution)
            lat.append(lat0 + j * resolution)
    return ids, np.array(lon), np.array(lat)
