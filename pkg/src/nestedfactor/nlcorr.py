"""Generalized non-linear (log-abs) correlations of factors and residuals.

For series X, Y and moment order p in (0, 2], the coefficient is

    (1/p^2) * ln( <|XY|^p> / (<|X|^p> <|Y|^p>) )

with time averages over the sample. The p^-2 normalization makes the
coefficient p-independent for log-normal volatilities, so the residual
p-dependence carries the non-Gaussianity of the volatility drivers.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSeriesError, DomainError
from .linfactor import FactorSeries, _fix_eigvec_signs

# Eight equally spaced orders between 0.2 and 2.
DEFAULT_P_GRID = tuple(np.linspace(0.2, 2.0, 8))
# |x| is clamped below at this value inside moments.
ABS_CLAMP = 1e-12


@dataclass(frozen=True)
class NonlinCorrSet:
    """Non-linear correlation matrices over a grid of orders p."""

    p_grid: tuple[float, ...]
    cff: np.ndarray  # (P, M, M)
    crr: np.ndarray  # (P, N, N)
    cfr: np.ndarray  # (P, M, N)
    n_clamped: int = 0

    @property
    def n_factors(self) -> int:
        return self.cff.shape[1]

    @property
    def n_assets(self) -> int:
        return self.crr.shape[1]

    def p_averaged(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(cff, crr, cfr) averaged over the p grid."""
        return self.cff.mean(axis=0), self.crr.mean(axis=0), self.cfr.mean(axis=0)


def _clamped_abs(x: np.ndarray) -> tuple[np.ndarray, int]:
    ax = np.abs(x)
    n_clamped = int(np.count_nonzero(ax < ABS_CLAMP))
    return np.maximum(ax, ABS_CLAMP), n_clamped


def _log_corr(u: np.ndarray, w: np.ndarray, p: float) -> np.ndarray:
    # u = |X|^p (T x a), w = |Y|^p (T x b); <|XY|^p> = (1/T) u'w elementwise.
    t = u.shape[0]
    cross = (u.T @ w) / t
    mu, mw = u.mean(axis=0), w.mean(axis=0)
    return np.log(cross / np.outer(mu, mw)) / p**2


def estimate_nlcorr(
    series: FactorSeries, p_grid: tuple[float, ...] | None = None
) -> NonlinCorrSet:
    """Estimate C^ff(p), C^rr(p), C^fr(p) over a grid of orders."""
    grid = tuple(float(p) for p in (p_grid if p_grid is not None else DEFAULT_P_GRID))
    if any(p <= 0 or p > 2 for p in grid):
        raise DomainError(f"all p must lie in (0, 2], got {grid}")
    f, e = series.factors, series.residuals
    if f.shape[0] < 2:
        raise DomainError("need at least two dates")
    if np.any(np.all(f == 0.0, axis=0)) or np.any(np.all(e == 0.0, axis=0)):
        raise DegenerateSeriesError("a factor or residual series is identically zero")
    af, nf = _clamped_abs(f)
    ae, ne = _clamped_abs(e)
    cff, crr, cfr = [], [], []
    for p in grid:
        uf, ue = af**p, ae**p
        ff = _log_corr(uf, uf, p)
        rr = _log_corr(ue, ue, p)
        cff.append(0.5 * (ff + ff.T))  # exact symmetry
        crr.append(0.5 * (rr + rr.T))
        cfr.append(_log_corr(uf, ue, p))
    return NonlinCorrSet(grid, np.array(cff), np.array(crr), np.array(cfr), nf + ne)


@dataclass(frozen=True)
class SpectralSummary:
    """Eigen/singular structure of a NonlinCorrSet."""

    cff_eigvals: np.ndarray
    cff_eigvecs: np.ndarray  # columns are eigenvectors
    crr_eigvals: np.ndarray
    crr_eigvecs: np.ndarray
    cfr_singvals: np.ndarray
    cfr_left: np.ndarray  # columns are left singular vectors
    cfr_right: np.ndarray


def _eig_desc(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(mat)
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_eigvec_signs(vecs[:, order])


def spectral_summary(corr_set: NonlinCorrSet, p_average: bool = True):
    """Spectral decomposition of the non-linear correlation matrices.

    With ``p_average`` the matrices are averaged over the p grid first and
    a single :class:`SpectralSummary` is returned; otherwise one summary
    per grid point.
    """
    if p_average:
        cff, crr, cfr = corr_set.p_averaged()
        triples = [(cff, crr, cfr)]
    else:
        triples = list(zip(corr_set.cff, corr_set.crr, corr_set.cfr))
    out = []
    for cff, crr, cfr in triples:
        fvals, fvecs = _eig_desc(cff)
        rvals, rvecs = _eig_desc(crr)
        u, s, vt = np.linalg.svd(cfr)
        u = _fix_eigvec_signs(u)
        # keep u'cfr v = s consistent after the sign convention on u
        vt = np.diag(1.0 / np.where(s > 0, s, 1.0)) @ u.T @ cfr
        out.append(
            SpectralSummary(fvals, fvecs, rvals, rvecs, s, u, vt.T)
        )
    return out[0] if p_average else out


def save_nlcorr(corr_set: NonlinCorrSet, directory: str) -> None:
    """One CSV per (matrix, p) plus an index file."""
    from .data import FLOAT_FMT

    os.makedirs(directory, exist_ok=True)
    index_rows = []
    for name, stack in [("cff", corr_set.cff), ("crr", corr_set.crr), ("cfr", corr_set.cfr)]:
        for k, p in enumerate(corr_set.p_grid):
            fname = f"{name}_p{k}.csv"
            with open(os.path.join(directory, fname), "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                for row in stack[k]:
                    writer.writerow([FLOAT_FMT % x for x in row])
            index_rows.append([name, FLOAT_FMT % p, fname])
    with open(os.path.join(directory, "index.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["matrix", "p", "file"])
        writer.writerows(index_rows)


def load_nlcorr(directory: str) -> NonlinCorrSet:
    """Read a directory written by :func:`save_nlcorr`."""
    entries: dict[str, list[tuple[float, str]]] = {"cff": [], "crr": [], "cfr": []}
    with open(os.path.join(directory, "index.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for name, p, fname in reader:
            entries[name].append((float(p), fname))
    stacks = {}
    p_grid = None
    for name, items in entries.items():
        mats = []
        ps = []
        for p, fname in items:
            with open(os.path.join(directory, fname), newline="", encoding="utf-8") as fh:
                mats.append(np.array([[float(x) for x in row] for row in csv.reader(fh) if row]))
            ps.append(p)
        stacks[name] = np.array(mats)
        p_grid = tuple(ps)
    return NonlinCorrSet(p_grid, stacks["cff"], stacks["crr"], stacks["cfr"])
