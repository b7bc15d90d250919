"""Ridge regression in dense form and in grouped (one-hot design) form.

Stage-1 regressions always use indicator features of the evidence set, so the
design matrix has a single unit entry per row.  Samples sharing an evidence
cell then share a prediction and the problem collapses to per-cell weighted
sums; :func:`grouped_ridge` solves exactly the same problem as
:func:`ridge` on the expanded one-hot design, only faster.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import SingularDesignError

log = logging.getLogger(__name__)


def ridge(X: np.ndarray, Y: np.ndarray, lam: float, weights: np.ndarray | None = None,
          intercept: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Weighted ridge regression of ``Y`` on ``X``.

    Minimizes ``sum_d w_d ||y_d - b - B^T x_d||^2 + lam ||B||_F^2``; the
    intercept ``b`` is not penalized.  ``lam = 0`` returns the minimum-norm
    least-squares solution.

    Returns
    -------
    B : ndarray, shape (p, q)
    b : ndarray, shape (q,)
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if intercept:
        xm = w @ X / w.sum()
        ym = w @ Y / w.sum()
    else:
        xm = np.zeros(X.shape[1])
        ym = np.zeros(Y.shape[1])
    Xc = (X - xm) * np.sqrt(w)[:, None]
    Yc = (Y - ym) * np.sqrt(w)[:, None]
    if lam > 0:
        G = Xc.T @ Xc
        G[np.diag_indices_from(G)] += lam
        B = np.linalg.solve(G, Xc.T @ Yc)
    else:
        B = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    return B, ym - xm @ B


def grouped_ridge(weights: np.ndarray, cell_means: np.ndarray, lam: float) -> np.ndarray:
    """Per-cell predictions of ridge-with-intercept on a one-hot design.

    Parameters
    ----------
    weights : ndarray, shape (n_cells,)
        Total sample weight in each cell (counts, or probabilities).
    cell_means : ndarray, shape (n_cells, q)
        Mean target within each cell.
    lam : float
        Ridge penalty on the slope coefficients.  With ``lam = 0`` the
        predictions are the cell means themselves.
    """
    w = np.asarray(weights, dtype=float)
    means = np.asarray(cell_means, dtype=float)
    total = w.sum()
    ybar = w @ means / total
    if lam <= 0:
        return means.copy()
    G = np.diag(w) - np.outer(w, w) / total
    G[np.diag_indices_from(G)] += lam
    R = w[:, None] * (means - ybar)
    B = np.linalg.solve(G, R)
    xbar = w / total
    return ybar + B - xbar @ B


def linear_operator(X: np.ndarray, Y: np.ndarray, weights: np.ndarray, lam: float) -> np.ndarray:
    """Matrix ``W`` minimizing ``sum_c w_c ||Y_c - W X_c||^2 + lam ||W||_F^2``.

    No intercept.  ``lam = 0`` falls back to the SVD pseudoinverse
    (minimum-norm) solution, which is what rank-deficient designs get.
    """
    sw = np.sqrt(np.asarray(weights, dtype=float))[:, None]
    M = X * sw
    T = Y * sw
    if lam > 0:
        G = M.T @ M
        G[np.diag_indices_from(G)] += lam
        return np.linalg.solve(G, M.T @ T).T
    Wt, _, rank, _ = np.linalg.lstsq(M, T, rcond=None)
    if rank < M.shape[1]:
        log.info("stage-2 design has rank %d < %d; using the minimum-norm solution", rank, M.shape[1])
    return Wt.T


def check_design(n_cells: int, has_instrument: bool, lam: float, where: str) -> None:
    if lam <= 0 and has_instrument and n_cells < 2:
        raise SingularDesignError(
            f"{where}: evidence features take a single value, so the unregularized "
            "stage-1 regression has no variance to fit"
        )
