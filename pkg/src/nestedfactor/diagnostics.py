"""Dependence diagnostics: copula medial point, Blomqvist effective
correlation, copula diagonals against the Gaussian benchmark, and the
analytic quadratic correlations of the one-mode model.

The pseudo-elliptical benchmark (returns = common amplitude x correlated
Gaussians) predicts a medial point of 1/4 + arcsin(rho)/(2 pi); the
binned ln|rho / rho_B| curve quantifies departures from it pair by pair.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate
from scipy.stats import norm, rankdata

from .errors import DimensionError, DomainError, LengthMismatchError
from .linfactor import LinearFactorModel
from .volcal import VolModel, phi0

# Default grid for copula diagonal sampling.
DEFAULT_DIAG_GRID = tuple(np.linspace(0.01, 0.99, 101))


def bivariate_normal_cdf(h: float, k: float, rho: float) -> float:
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho.

    Adaptive quadrature on the single-integral reduction; absolute error
    well below 1e-8.
    """
    if not -1.0 <= rho <= 1.0:
        raise DomainError(f"correlation {rho} outside [-1, 1]")
    ph, pk = norm.cdf(h), norm.cdf(k)
    if rho >= 1.0 - 1e-12:
        return float(min(ph, pk))
    if rho <= -1.0 + 1e-12:
        return float(max(0.0, ph + pk - 1.0))
    if rho == 0.0:
        return float(ph * pk)

    def integrand(r):
        q = 1.0 - r * r
        return np.exp(-(h * h - 2.0 * r * h * k + k * k) / (2.0 * q)) / np.sqrt(q)

    tail, _ = integrate.quad(integrand, 0.0, rho, epsabs=1e-12, epsrel=1e-12, limit=200)
    return float(ph * pk + tail / (2.0 * np.pi))


def gaussian_copula_point(u: float, v: float, rho: float) -> float:
    """Gaussian copula C_G(u, v; rho)."""
    if not (0.0 < u < 1.0 and 0.0 < v < 1.0):
        raise DomainError("u, v must lie strictly inside (0, 1)")
    return bivariate_normal_cdf(norm.ppf(u), norm.ppf(v), rho)


def _plotting_positions(x: np.ndarray) -> np.ndarray:
    # midranks mapped to k / (T + 1)
    return rankdata(x, method="average") / (len(x) + 1.0)


def empirical_copula_point(x: np.ndarray, y: np.ndarray, u: float, v: float) -> float:
    """Fraction of dates with both rank positions below (u, v)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatchError("x and y must be equal-length 1-d series")
    if len(x) < 10:
        raise LengthMismatchError("need at least 10 observations")
    if not (0.0 < u < 1.0 and 0.0 < v < 1.0):
        raise DomainError("u, v must lie strictly inside (0, 1)")
    px, py = _plotting_positions(x), _plotting_positions(y)
    return float(np.mean((px <= u) & (py <= v)))


def rho_blomqvist(medial: float) -> float:
    """Effective correlation cos(2 pi C(1/2, 1/2)).

    With this convention an elliptical pair with correlation rho maps to
    -rho; downstream reporting uses ln|rho / rho_B|, which is insensitive
    to the sign.
    """
    if not 0.0 <= medial <= 0.5:
        raise DomainError(f"medial point {medial} outside [0, 1/2]")
    return float(np.cos(2.0 * np.pi * medial))


def elliptical_medial(rho: float) -> float:
    """Medial point 1/4 + arcsin(rho)/(2 pi) of any elliptical pair."""
    if not -1.0 <= rho <= 1.0:
        raise DomainError(f"correlation {rho} outside [-1, 1]")
    return float(0.25 + np.arcsin(rho) / (2.0 * np.pi))


def copula_diagonals(
    x: np.ndarray,
    y: np.ndarray,
    p_grid: tuple[float, ...] = DEFAULT_DIAG_GRID,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized diagonal and anti-diagonal departures from the Gaussian
    copula with the pair's sample correlation:

        delta_d(p) = (C(p, p)     - C_G(p, p))     / (p (1 - p))
        delta_a(p) = (C(p, 1 - p) - C_G(p, 1 - p)) / (p (1 - p))
    """
    grid = np.asarray(p_grid, dtype=float)
    if np.any(grid <= 0.0) or np.any(grid >= 1.0):
        raise DomainError("diagonal grid must lie strictly inside (0, 1)")
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape:
        raise LengthMismatchError("x and y must have equal length")
    rho = float(np.corrcoef(x, y)[0, 1])
    px, py = _plotting_positions(x), _plotting_positions(y)
    delta_d = np.empty(len(grid))
    delta_a = np.empty(len(grid))
    for g, p in enumerate(grid):
        norm_pq = p * (1.0 - p)
        c_d = np.mean((px <= p) & (py <= p))
        c_a = np.mean((px <= p) & (py <= 1.0 - p))
        delta_d[g] = (c_d - gaussian_copula_point(p, p, rho)) / norm_pq
        delta_a[g] = (c_a - gaussian_copula_point(p, 1.0 - p, rho)) / norm_pq
    return delta_d, delta_a


def blomqvist_curve(
    returns: np.ndarray,
    bin_edges: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binned ln|rho / rho_B| versus rho over all column pairs.

    Returns (bin_centers, mean ln|rho/rho_B| per bin, pair counts); bins
    with no pairs get NaN.
    """
    r = np.asarray(returns, dtype=float)
    t, n = r.shape
    pos = np.column_stack([_plotting_positions(r[:, j]) for j in range(n)])
    below = (pos <= 0.5).astype(float)
    medial = (below.T @ below) / t
    rho = np.corrcoef(r, rowvar=False)
    rho_b = np.cos(2.0 * np.pi * medial)
    iu = np.triu_indices(n, k=1)
    rhos = rho[iu]
    with np.errstate(divide="ignore", invalid="ignore"):
        lnratio = np.log(np.abs(rhos / rho_b[iu]))
    edges = np.asarray(bin_edges, dtype=float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    values = np.full(len(centers), np.nan)
    counts = np.zeros(len(centers), dtype=int)
    which = np.digitize(rhos, edges) - 1
    for b in range(len(centers)):
        mask = (which == b) & np.isfinite(lnratio)
        counts[b] = int(mask.sum())
        if counts[b]:
            values[b] = float(lnratio[mask].mean())
    return centers, values, counts


def quadratic_corr_model(
    linear: LinearFactorModel,
    vol: VolModel,
    i: int,
    j: int,
    phi_pair=None,
) -> float:
    """Analytic E[r_i^2 r_j^2] of the one-mode nested model.

    ``phi_pair(a, b)`` must return the MGF ratio of the dominant driver
    evaluated at (2a, 2b); the default uses the quartic cumulant
    expansion exp(4 * phi0(a, b; p=2)). Reduces to 1 + 2 rho_ij^2 when
    all volatility parameters vanish.
    """
    if vol.n_modes != 1:
        raise DimensionError("analytic quadratic correlations require K=1")
    if vol.B is None or vol.s_tilde is None:
        raise DimensionError("full volatility model required")
    w = linear.weights
    m, n = w.shape
    if vol.n_factors != m or vol.n_assets != n:
        raise DimensionError("volatility model not dimensioned to the weights")
    if not (0 <= i < n and 0 <= j < n):
        raise DimensionError("asset index out of range")
    if phi_pair is None:
        zeta, kappa = vol.zeta0, vol.kappa0

        def phi_pair(a, b):
            return np.exp(4.0 * phi0(a, b, 2.0, zeta, kappa))

    a = vol.A[:, 0]
    b = vol.B[:, 0]
    v = linear.residual_variances(floor=0.0)
    wi, wj = w[:, i], w[:, j]

    coef = np.outer(wi**2, wj**2) + 2.0 * np.outer(wi * wj, wi * wj)
    x = phi_pair(a[:, None], a[None, :])
    x = x * np.where(np.eye(m, dtype=bool), np.exp(4.0 * vol.s**2), 1.0)
    term1 = float(np.sum(coef * x))

    same = 3.0 if i == j else 1.0
    term2 = same * v[i] * float(np.sum(wj**2 * phi_pair(a, b[i])))
    term3 = same * v[j] * float(np.sum(wi**2 * phi_pair(a, b[j])))
    tail = 3.0 * np.exp(4.0 * vol.s_tilde[i] ** 2) if i == j else 1.0
    term4 = v[i] * v[j] * float(phi_pair(b[i], b[j])) * tail
    return term1 + term2 + term3 + term4
