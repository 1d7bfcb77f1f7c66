"""Calibration of the nested volatility model from log-abs correlations.

The volatility of each factor and residual is driven by K common modes
(K = 1 or 2) plus an idiosyncratic Gaussian log-volatility. The dominant
mode carries skewness zeta0 and excess kurtosis kappa0; the second mode,
when present, is treated as Gaussian. Calibration fits the analytic
predictions for the log-abs correlation matrices to their estimates, in
two steps: factor loadings A, scales s and (zeta0, kappa0) from the
factor-factor matrix jointly over the p grid, then residual loadings B
and scales s_tilde at a single order p_star.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .errors import DomainError, SingularityError
from .linfactor import FactorSeries, _fix_eigvec_signs
from .nlcorr import ABS_CLAMP, NonlinCorrSet

# Box bounds keeping the quartic MGF expansion sane.
ZETA_BOUND = 5.0
KAPPA_BOUND = 10.0
LOADING_BOUND = 3.0
# Floor on s^2 when inverse-variance regression weights are requested.
OMEGA_WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class VolModel:
    """Loadings and scales of the nested volatility model.

    A : (M, K) factor log-vol loadings; B : (N, K) residual log-vol
    loadings (None until the residual step has run); s, s_tilde the
    idiosyncratic log-vol scales; zeta0/kappa0 the third moment and
    excess fourth moment of the dominant driver (mean 0, variance 1).
    """

    n_modes: int
    A: np.ndarray
    s: np.ndarray
    zeta0: float
    kappa0: float
    B: np.ndarray | None = None
    s_tilde: np.ndarray | None = None
    converged: bool = True

    def __post_init__(self):
        if self.n_modes not in (1, 2):
            raise DomainError("n_modes must be 1 or 2")
        a = np.atleast_2d(np.asarray(self.A, dtype=float))
        if a.shape[1] != self.n_modes:
            raise DomainError(f"A must be M x {self.n_modes}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        if np.any(self.s < 0):
            raise DomainError("s must be nonnegative")
        if self.kappa0 < self.zeta0**2 - 2 - 1e-9:
            raise DomainError("kappa0 violates the moment bound zeta0^2 - 2")
        if self.B is not None:
            b = np.atleast_2d(np.asarray(self.B, dtype=float))
            if b.shape[1] != self.n_modes:
                raise DomainError(f"B must be N x {self.n_modes}")
            object.__setattr__(self, "B", b)
        if self.s_tilde is not None:
            st = np.asarray(self.s_tilde, dtype=float)
            if np.any(st < 0):
                raise DomainError("s_tilde must be nonnegative")
            object.__setattr__(self, "s_tilde", st)

    @property
    def n_factors(self) -> int:
        return self.A.shape[0]

    @property
    def n_assets(self) -> int:
        return 0 if self.B is None else self.B.shape[0]


@dataclass(frozen=True)
class OmegaSeries:
    """Reconstructed common log-volatility driver(s)."""

    omega0: np.ndarray
    omega1: np.ndarray | None
    source: str  # "factor-regression" or "residual-regression"


def gamma_p(p):
    """Normalized 2p-moment of |Gaussian|:

    gamma(p) = (1/p^2) ln( sqrt(pi) Gamma(1/2 + p) / Gamma((1+p)/2)^2 ).
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DomainError("p must be positive")
    val = (0.5 * np.log(np.pi) + gammaln(0.5 + p) - 2.0 * gammaln((1.0 + p) / 2.0)) / p**2
    return float(val) if val.ndim == 0 else val


def phi0(a, b, p, zeta0: float, kappa0: float):
    """Cumulant expansion of (1/p^2) ln[ M(pa+pb) / (M(pa) M(pb)) ].

    Polynomial in p; reduces to a*b (the log-normal value) when
    zeta0 = kappa0 = 0. Broadcasts over a and b.
    """
    ab = a * b
    cubic = a**2 * b + a * b**2
    quartic = 2 * a**3 * b + 3 * a**2 * b**2 + 2 * a * b**3
    return ab + (p / 2.0) * zeta0 * cubic + (p**2 / 12.0) * kappa0 * quartic


def _dphi0_da(a, b, p, zeta0, kappa0):
    return (
        b
        + (p / 2.0) * zeta0 * (2 * a * b + b**2)
        + (p**2 / 12.0) * kappa0 * (6 * a**2 * b + 6 * a * b**2 + 2 * b**3)
    )


def _dphi0_dzeta(a, b, p):
    return (p / 2.0) * (a**2 * b + a * b**2)


def _dphi0_dkappa(a, b, p):
    return (p**2 / 12.0) * (2 * a**3 * b + 3 * a**2 * b**2 + 2 * a * b**3)


def _pair_phi(x0, y0, x1, y1, p, zeta0, kappa0):
    # phi for mode 0 plus the Gaussian contribution of mode 1.
    out = phi0(x0[:, None], y0[None, :], p, zeta0, kappa0)
    if x1 is not None:
        out = out + np.outer(x1, y1)
    return out


def model_nlcorr(vol: VolModel, p: float):
    """Analytic log-abs correlation matrices at order p.

    Returns (cff, cfr, crr). Requires a full model (B, s_tilde present).
    """
    if vol.B is None or vol.s_tilde is None:
        raise DomainError("model is missing residual loadings B / s_tilde")
    a0 = vol.A[:, 0]
    a1 = vol.A[:, 1] if vol.n_modes == 2 else None
    b0 = vol.B[:, 0]
    b1 = vol.B[:, 1] if vol.n_modes == 2 else None
    g = gamma_p(p)
    cff = _pair_phi(a0, a0, a1, a1, p, vol.zeta0, vol.kappa0)
    cff[np.diag_indices_from(cff)] += g + vol.s**2
    cfr = _pair_phi(a0, b0, a1, b1, p, vol.zeta0, vol.kappa0)
    crr = _pair_phi(b0, b0, b1, b1, p, vol.zeta0, vol.kappa0)
    crr[np.diag_indices_from(crr)] += g + vol.s_tilde**2
    return cff, cfr, crr


# ---------------------------------------------------------------------------
# step 1: factor loadings, scales and non-Gaussianity from cff over the p grid


def _unpack_factor(theta: np.ndarray, m: int, k: int):
    a = theta[: m * k].reshape(m, k)
    s = theta[m * k : m * k + m]
    zeta, kappa = theta[-2], theta[-1]
    return a, s, zeta, kappa


def factor_vol_loss_grad(
    theta: np.ndarray,
    cff_emp: np.ndarray,
    p_grid: tuple[float, ...],
    k: int,
    overlap_lambda: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Joint quadratic misfit of the factor-factor predictions over the
    p grid, with analytic gradient.

    theta packs [A (M*K), s (M), zeta0, kappa0]. For K = 2 an overlap
    penalty lambda * (sum_k A_k0 A_k1)^2 orthogonalizes the two modes.
    """
    m = cff_emp.shape[1]
    a, s, zeta, kappa = _unpack_factor(theta, m, k)
    a0 = a[:, 0]
    a1 = a[:, 1] if k == 2 else None
    grad_a = np.zeros_like(a)
    grad_s = np.zeros_like(s)
    grad_z = 0.0
    grad_k = 0.0
    loss = 0.0
    for p, emp in zip(p_grid, cff_emp):
        model = _pair_phi(a0, a0, a1, a1, p, zeta, kappa)
        model[np.diag_indices(m)] += gamma_p(p) + s**2
        err = model - emp
        loss += float(np.sum(err**2))
        d1 = _dphi0_da(a0[:, None], a0[None, :], p, zeta, kappa)
        grad_a[:, 0] += 4.0 * np.sum(err * d1, axis=1)
        if k == 2:
            grad_a[:, 1] += 4.0 * err @ a1
        grad_s += 4.0 * np.diag(err) * s
        grad_z += float(np.sum(2.0 * err * _dphi0_dzeta(a0[:, None], a0[None, :], p)))
        grad_k += float(np.sum(2.0 * err * _dphi0_dkappa(a0[:, None], a0[None, :], p)))
    if k == 2 and overlap_lambda > 0.0:
        overlap = float(a0 @ a1)
        loss += overlap_lambda * overlap**2
        grad_a[:, 0] += 2.0 * overlap_lambda * overlap * a1
        grad_a[:, 1] += 2.0 * overlap_lambda * overlap * a0
    grad = np.concatenate([grad_a.ravel(), grad_s, [grad_z, grad_k]])
    return loss, grad


def _spectral_prior(avg: np.ndarray, k: int) -> np.ndarray:
    vals, vecs = np.linalg.eigh(avg)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], _fix_eigvec_signs(vecs[:, order])
    lam = np.maximum(vals[:k], 0.0)
    return vecs[:, :k] * np.sqrt(lam)[None, :]


def calibrate_factor_vol(
    corr_set: NonlinCorrSet,
    k: int = 1,
    max_iter: int = 500,
) -> VolModel:
    """Estimate A, s, zeta0, kappa0 from the factor-factor matrices.

    Starts from the top-K spectral prior of the p-averaged cff; enforces
    s >= 0 and the moment bound kappa0 >= zeta0^2 - 2. The returned loss
    never exceeds the prior loss.
    """
    if k not in (1, 2):
        raise DomainError("K must be 1 or 2")
    grid = corr_set.p_grid
    cff = corr_set.cff
    m = cff.shape[1]
    avg = cff.mean(axis=0)
    gbar = float(np.mean([gamma_p(p) for p in grid]))
    # the gamma(p) offset sits on the diagonal; remove it before the
    # spectral prior or the top mode absorbs it
    work = avg - gbar * np.eye(m)
    a_prior = _spectral_prior(work, k)
    diag_excess = np.diag(work) - np.sum(a_prior**2, axis=1)
    s_prior = np.sqrt(np.maximum(diag_excess, 0.0))
    theta0 = np.concatenate([a_prior.ravel(), s_prior, [0.0, 0.0]])

    overlap_lambda = 0.0
    if k == 2:
        off = avg[~np.eye(m, dtype=bool)]
        overlap_lambda = float(np.mean(off**2)) if off.size else 1.0

    def fun(theta):
        return factor_vol_loss_grad(theta, cff, grid, k, overlap_lambda)

    bounds = (
        [(-LOADING_BOUND, LOADING_BOUND)] * (m * k)
        + [(0.0, LOADING_BOUND)] * m
        + [(-ZETA_BOUND, ZETA_BOUND), (-KAPPA_BOUND, KAPPA_BOUND)]
    )
    constraint = {
        "type": "ineq",
        "fun": lambda th: th[-1] - th[-2] ** 2 + 2.0,
        "jac": lambda th: np.concatenate([np.zeros(len(th) - 2), [-2.0 * th[-2], 1.0]]),
    }
    res = optimize.minimize(
        fun,
        theta0,
        jac=True,
        method="SLSQP",
        bounds=bounds,
        constraints=[constraint],
        options={"maxiter": max_iter, "ftol": 1e-16},
    )
    best = res.x if fun(res.x)[0] <= fun(theta0)[0] else theta0
    a, s, zeta, kappa = _unpack_factor(best, m, k)
    kappa = max(kappa, zeta**2 - 2.0)  # clip any constraint slack
    # canonical orientation: mean loading of each mode is nonnegative
    if a[:, 0].sum() < 0:
        a = a.copy()
        a[:, 0] *= -1
        zeta = -zeta
    if k == 2 and a[:, 1].sum() < 0:
        a = a.copy()
        a[:, 1] *= -1
    return VolModel(
        n_modes=k,
        A=a,
        s=np.abs(s),
        zeta0=float(zeta),
        kappa0=float(kappa),
        converged=bool(res.success),
    )


# ---------------------------------------------------------------------------
# step 2: residual loadings and scales at a single order p_star


def residual_vol_loss_grad(
    theta: np.ndarray,
    vol: VolModel,
    cfr_emp: np.ndarray | None,
    crr_emp: np.ndarray | None,
    p_star: float,
) -> tuple[float, np.ndarray]:
    """Misfit of the fac-res and/or res-res predictions at p_star.

    theta packs [B (N*K), s_tilde (N)]; s_tilde only enters the res-res
    diagonal. A, zeta0, kappa0 come frozen from the factor step.
    """
    k = vol.n_modes
    n = (cfr_emp.shape[1] if cfr_emp is not None else crr_emp.shape[0])
    b = theta[: n * k].reshape(n, k)
    st = theta[n * k :]
    b0 = b[:, 0]
    b1 = b[:, 1] if k == 2 else None
    a0 = vol.A[:, 0]
    a1 = vol.A[:, 1] if k == 2 else None
    zeta, kappa = vol.zeta0, vol.kappa0
    grad_b = np.zeros_like(b)
    grad_st = np.zeros_like(st)
    loss = 0.0
    if cfr_emp is not None:
        model = _pair_phi(a0, b0, a1, b1, p_star, zeta, kappa)
        err = model - cfr_emp
        loss += float(np.sum(err**2))
        db = _dphi0_da(b0[None, :], a0[:, None], p_star, zeta, kappa)  # d/db via symmetry
        grad_b[:, 0] += 2.0 * np.sum(err * db, axis=0)
        if k == 2:
            grad_b[:, 1] += 2.0 * err.T @ a1
    if crr_emp is not None:
        model = _pair_phi(b0, b0, b1, b1, p_star, zeta, kappa)
        model[np.diag_indices(n)] += gamma_p(p_star) + st**2
        err = model - crr_emp
        loss += float(np.sum(err**2))
        d1 = _dphi0_da(b0[:, None], b0[None, :], p_star, zeta, kappa)
        grad_b[:, 0] += 4.0 * np.sum(err * d1, axis=1)
        if k == 2:
            grad_b[:, 1] += 4.0 * err @ b1
        grad_st += 4.0 * np.diag(err) * st
    return loss, np.concatenate([grad_b.ravel(), grad_st])


def calibrate_residual_vol(
    corr_set: NonlinCorrSet,
    partial: VolModel,
    p_star: float = 1.0,
    mode: str = "joint",
    max_iter: int = 500,
) -> VolModel:
    """Estimate B (and s_tilde) given the factor-step parameters.

    mode selects the fitted blocks: "fac-res" (B only, s_tilde from the
    res-res diagonal), "res-res" (B, s_tilde), or "joint" (both losses).
    """
    if mode not in ("fac-res", "res-res", "joint"):
        raise DomainError(f"unknown mode {mode!r}")
    grid = np.asarray(corr_set.p_grid)
    idx = int(np.argmin(np.abs(grid - p_star)))
    if abs(grid[idx] - p_star) > 1e-9:
        raise DomainError(f"p_star={p_star} not on the estimated grid")
    cfr = corr_set.cfr[idx] if mode in ("fac-res", "joint") else None
    crr = corr_set.crr[idx] if mode in ("res-res", "joint") else None
    crr_full = corr_set.crr[idx]
    n = corr_set.n_assets
    k = partial.n_modes

    gp = gamma_p(p_star)
    crr_avg = corr_set.crr.mean(axis=0)
    gbar = float(np.mean([gamma_p(p) for p in grid]))
    b_prior = _spectral_prior(crr_avg - gbar * np.eye(n), k)
    st_prior = np.sqrt(
        np.maximum(np.diag(crr_full) - gp - np.sum(b_prior**2, axis=1), 0.0)
    )

    def fun(theta):
        return residual_vol_loss_grad(theta, partial, cfr, crr, p_star)

    # resolve the sign ambiguity of each prior mode against the data
    theta0 = np.concatenate([b_prior.ravel(), st_prior])
    for c in range(k):
        flipped = b_prior.copy()
        flipped[:, c] *= -1
        cand = np.concatenate([flipped.ravel(), st_prior])
        if fun(cand)[0] < fun(theta0)[0]:
            b_prior = flipped
            theta0 = cand

    bounds = [(-LOADING_BOUND, LOADING_BOUND)] * (n * k) + [(0.0, LOADING_BOUND)] * n
    res = optimize.minimize(
        fun,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10},
    )
    best = res.x if fun(res.x)[0] <= fun(theta0)[0] else theta0
    b = best[: n * k].reshape(n, k)
    st = np.abs(best[n * k :])
    if mode == "fac-res":
        # s_tilde from the res-res diagonal with the fitted B
        diag_model = phi0(b[:, 0], b[:, 0], p_star, partial.zeta0, partial.kappa0)
        if k == 2:
            diag_model = diag_model + b[:, 1] ** 2
        st = np.sqrt(np.maximum(np.diag(crr_full) - gp - diag_model, 0.0))
    return replace(partial, B=b, s_tilde=st, converged=partial.converged and bool(res.success))


# ---------------------------------------------------------------------------
# driver reconstruction


def reconstruct_omega(
    series: FactorSeries,
    vol: VolModel,
    source: str = "residual-regression",
    inverse_variance_weights: bool = False,
) -> OmegaSeries:
    """Date-by-date regression of centered log-abs series on the loadings.

    The residual regression (default) pools N series and is the canonical,
    less noisy determination; the factor regression uses only M series.
    Plain least squares by default; inverse-variance weighting by the
    fitted idiosyncratic scales is available.
    """
    if source == "residual-regression":
        if vol.B is None or vol.s_tilde is None:
            raise DomainError("residual regression requires B and s_tilde")
        x, loadings, scales = series.residuals, vol.B, vol.s_tilde
    elif source == "factor-regression":
        x, loadings, scales = series.factors, vol.A, vol.s
    else:
        raise DomainError(f"unknown source {source!r}")
    logs = np.log(np.maximum(np.abs(x), ABS_CLAMP))
    y = logs - logs.mean(axis=0)
    if inverse_variance_weights:
        w = 1.0 / np.maximum(scales**2, OMEGA_WEIGHT_FLOOR)
    else:
        w = np.ones(loadings.shape[0])
    lw = loadings * w[:, None]
    gram = loadings.T @ lw  # (K, K)
    if np.linalg.cond(gram) > 1e12 or not np.all(np.isfinite(gram)):
        raise SingularityError("volatility loadings do not span the regression")
    omega = np.linalg.solve(gram, lw.T @ y.T).T  # (T, K)
    return OmegaSeries(
        omega0=omega[:, 0],
        omega1=omega[:, 1] if vol.n_modes == 2 else None,
        source=source,
    )


# ---------------------------------------------------------------------------
# serialization


def save_vol_model(vol: VolModel, path: str) -> None:
    """Key-value sections: scalars, then A, B, s, s_tilde blocks."""
    from .data import FLOAT_FMT

    def fmt(x):
        return FLOAT_FMT % x

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[scalars]\n")
        fh.write(f"n_modes = {vol.n_modes}\n")
        fh.write(f"zeta0 = {fmt(vol.zeta0)}\n")
        fh.write(f"kappa0 = {fmt(vol.kappa0)}\n")
        for name, arr in [("A", vol.A), ("B", vol.B)]:
            if arr is None:
                continue
            fh.write(f"[{name}]\n")
            for row in arr:
                fh.write(" ".join(fmt(x) for x in row) + "\n")
        for name, arr in [("s", vol.s), ("s_tilde", vol.s_tilde)]:
            if arr is None:
                continue
            fh.write(f"[{name}]\n")
            for x in arr:
                fh.write(fmt(x) + "\n")


def load_vol_model(path: str) -> VolModel:
    sections: dict[str, list[str]] = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            else:
                sections[current].append(line)
    scalars = {}
    for item in sections["scalars"]:
        key, _, value = item.partition("=")
        scalars[key.strip()] = value.strip()
    k = int(scalars["n_modes"])
    a = np.array([[float(x) for x in row.split()] for row in sections["A"]])
    b = (
        np.array([[float(x) for x in row.split()] for row in sections["B"]])
        if "B" in sections
        else None
    )
    s = np.array([float(x) for x in sections["s"]])
    st = np.array([float(x) for x in sections["s_tilde"]]) if "s_tilde" in sections else None
    return VolModel(
        n_modes=k,
        A=a,
        s=s,
        zeta0=float(scalars["zeta0"]),
        kappa0=float(scalars["kappa0"]),
        B=b,
        s_tilde=st,
    )


def save_omega(omega: OmegaSeries, dates: list[str], path: str) -> None:
    import csv

    from .data import FLOAT_FMT

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["date", "omega0"] + (["omega1"] if omega.omega1 is not None else [])
        writer.writerow(header)
        for i, d in enumerate(dates):
            row = [d, FLOAT_FMT % omega.omega0[i]]
            if omega.omega1 is not None:
                row.append(FLOAT_FMT % omega.omega1[i])
            writer.writerow(row)
