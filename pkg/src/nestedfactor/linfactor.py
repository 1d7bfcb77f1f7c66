"""Linear factor model: PCA prior, off-diagonal calibration, extraction.

The M-factor model r_i = sum_k W_ki f_k + e_i is calibrated by matching
the off-diagonal of the sample correlation matrix with W'W, starting
from the PCA identification W = Lambda^{1/2} V'. Factor and residual
series are then recovered by date-by-date GLS regression on the fitted
weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import ReturnPanel
from .errors import RankError, SingularityError

# Floor on residual variances used in GLS weighting.
RESIDUAL_VAR_FLOOR = 1e-6
# Smooth barrier keeping sum_k W_ki^2 <= 1 during calibration.
BARRIER_COEF = 10.0


@dataclass(frozen=True)
class LinearFactorModel:
    """M x N weight matrix of a linear factor model."""

    weights: np.ndarray  # (M, N)
    converged: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise RankError("weights must be an M x N matrix")
        object.__setattr__(self, "weights", w)
        w.setflags(write=False)

    @property
    def n_factors(self) -> int:
        return self.weights.shape[0]

    @property
    def n_assets(self) -> int:
        return self.weights.shape[1]

    def residual_variances(self, floor: float = 0.0) -> np.ndarray:
        """v_i = 1 - sum_k W_ki^2, optionally floored."""
        v = 1.0 - np.sum(self.weights**2, axis=0)
        return np.maximum(v, floor)


@dataclass(frozen=True)
class FactorSeries:
    """Reconstructed factor (T x M) and residual (T x N) series."""

    factors: np.ndarray
    residuals: np.ndarray


def sample_correlation(panel: ReturnPanel) -> np.ndarray:
    """(1/T) R'R of a standardized panel."""
    r = panel.returns
    return (r.T @ r) / r.shape[0]


def _fix_eigvec_signs(vecs: np.ndarray) -> np.ndarray:
    # Column convention: component of largest magnitude positive,
    # magnitude ties broken by lowest index.
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        i = int(np.argmax(np.abs(col) >= np.abs(col).max()))
        if col[i] < 0:
            out[:, j] = -col
    return out


def pca_prior(panel: ReturnPanel, m: int) -> LinearFactorModel:
    """PCA identification W = Lambda_M^{1/2} V_M' of the factor weights."""
    n = panel.n_assets
    if m > n or m < 1:
        raise RankError(f"need 1 <= M <= N, got M={m}, N={n}")
    corr = sample_correlation(panel)
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    vecs = _fix_eigvec_signs(vecs)
    lam = np.maximum(vals[:m], 0.0)
    return LinearFactorModel(np.sqrt(lam)[:, None] * vecs[:, :m].T)


def offdiag_loss(weights: np.ndarray, corr: np.ndarray) -> float:
    """Squared Frobenius norm of the off-diagonal of W'W - C."""
    delta = weights.T @ weights - corr
    np.fill_diagonal(delta, 0.0)
    return float(np.sum(delta**2))


def offdiag_loss_grad(weights: np.ndarray, corr: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`offdiag_loss` with respect to W."""
    delta = weights.T @ weights - corr
    np.fill_diagonal(delta, 0.0)
    return 4.0 * weights @ delta


def _barrier(weights: np.ndarray) -> tuple[float, np.ndarray]:
    # Cubic hinge on the excess of sum_k W_ki^2 over 1 (twice differentiable).
    excess = np.maximum(np.sum(weights**2, axis=0) - 1.0, 0.0)
    val = BARRIER_COEF * float(np.sum(excess**3))
    grad = BARRIER_COEF * 6.0 * excess[None, :] ** 2 * weights
    return val, grad


def calibration_objective(weights: np.ndarray, corr: np.ndarray) -> tuple[float, np.ndarray]:
    """Off-diagonal loss plus residual-variance barrier, with gradient."""
    bval, bgrad = _barrier(weights)
    return offdiag_loss(weights, corr) + bval, offdiag_loss_grad(weights, corr) + bgrad


def calibrate_weights(
    panel: ReturnPanel,
    m: int,
    start: LinearFactorModel | None = None,
    rel_tol: float = 1e-10,
    max_iter: int = 2000,
) -> LinearFactorModel:
    """Minimize the off-diagonal misfit of W'W from the PCA prior.

    Deterministic quasi-Newton descent (L-BFGS with analytic gradient).
    The returned loss never exceeds the loss at the starting point; if
    the iteration cap is hit before convergence, the best iterate is
    returned with ``converged=False``.
    """
    corr = sample_correlation(panel)
    prior = start if start is not None else pca_prior(panel, m)
    if prior.n_factors != m or prior.n_assets != panel.n_assets:
        raise RankError("starting model dimensions do not match the request")
    shape = prior.weights.shape

    def fun(x):
        val, grad = calibration_objective(x.reshape(shape), corr)
        return val, grad.ravel()

    res = optimize.minimize(
        fun,
        prior.weights.ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": rel_tol, "gtol": 1e-12},
    )
    w_opt = res.x.reshape(shape)
    prior_val, _ = calibration_objective(prior.weights, corr)
    opt_val, _ = calibration_objective(w_opt, corr)
    if opt_val > prior_val:
        w_opt, opt_val = prior.weights, prior_val
    converged = bool(res.success) or opt_val <= prior_val * (1 + rel_tol)
    return LinearFactorModel(w_opt, converged=converged)


def extract_series(panel: ReturnPanel, model: LinearFactorModel) -> FactorSeries:
    """Date-by-date GLS regression R_t = F_t W + E_t.

    Per-asset weights are 1/v_i with v_i floored at RESIDUAL_VAR_FLOOR.
    """
    w = model.weights
    if w.shape[1] != panel.n_assets:
        raise RankError("model dimensioned for a different panel")
    v = model.residual_variances(floor=RESIDUAL_VAR_FLOOR)
    wd = w / v[None, :]  # W diag(1/v)
    gram = wd @ w.T  # (M, M)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularityError("GLS design matrix W diag(1/v) W' is singular")
    factors = np.linalg.solve(gram, wd @ panel.returns.T).T
    residuals = panel.returns - factors @ w
    return FactorSeries(factors=factors, residuals=residuals)


def model_correlation(model: LinearFactorModel) -> np.ndarray:
    """Model-implied correlation: off-diagonal W'W, exact unit diagonal."""
    corr = model.weights.T @ model.weights
    np.fill_diagonal(corr, 1.0)
    return corr


def subspace_distance(model: LinearFactorModel, prior: LinearFactorModel) -> float:
    """D(M) = -(1/M) ln |det(Wtilde_F' W_prior_normalized)|.

    ``model`` rows are orthonormalized (QR of the row space); ``prior``
    rows are normalized to unit length. The absolute value of the
    determinant removes the orientation ambiguity.
    """
    wf, wp = model.weights, prior.weights
    if wf.shape != wp.shape:
        raise RankError("models must share M and N")
    m = wf.shape[0]
    q, r = np.linalg.qr(wf.T)  # q: (N, M) orthonormal columns
    if np.min(np.abs(np.diag(r))) < 1e-12 * max(1.0, np.abs(r).max()):
        raise RankError("factor weight rows are rank deficient")
    norms = np.linalg.norm(wp, axis=1)
    if np.any(norms == 0.0):
        raise RankError("prior has a zero weight row")
    overlap = q.T @ (wp / norms[:, None]).T
    sign, logdet = np.linalg.slogdet(overlap)
    if sign == 0:
        raise RankError("overlap matrix is singular")
    return -logdet / m


def save_weights(model: LinearFactorModel, path: str, asset_ids: list[str]) -> None:
    """Write the weight matrix as CSV, factors as rows."""
    import csv

    from .data import FLOAT_FMT

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(asset_ids)
        for row in model.weights:
            writer.writerow([FLOAT_FMT % x for x in row])


def load_weights(path: str) -> tuple[LinearFactorModel, list[str]]:
    """Read a weight matrix CSV written by :func:`save_weights`."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        asset_ids = next(reader)
        rows = [[float(x) for x in row] for row in reader if row]
    return LinearFactorModel(np.array(rows)), asset_ids
