"""Synthetic return panels from a fully specified nested factor model.

The dominant log-volatility driver is sampled from a shifted-scaled Beta
distribution whose first four moments match (0, 1, zeta0, 3 + kappa0);
the Beta family is used because it allows negative excess kurtosis. All other drivers are iid Gaussian. Exponential factors
are divided by their analytic root-mean-square so the factor/residual
variance normalization holds exactly, not just asymptotically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import hyp1f1

from .data import ReturnPanel
from .errors import DimensionError, DomainError, InfeasibleMomentsError
from .linfactor import LinearFactorModel
from .volcal import VolModel

# (zeta0, kappa0) closer to Gaussian than this uses the Gaussian driver.
GAUSSIAN_TOL = 1e-3


@dataclass(frozen=True)
class BetaParams:
    """Shifted-scaled Beta law for the dominant log-vol driver.

    omega0 = shift + scale * X with X ~ Beta(alpha, beta); `gaussian`
    flags the standard-normal fallback (exact Gaussian moments are not
    reachable inside the Beta family).
    """

    alpha: float
    beta: float
    shift: float
    scale: float
    gaussian: bool = False


@dataclass(frozen=True)
class GeneratorSpec:
    """Everything needed to simulate the model deterministically."""

    linear: LinearFactorModel
    vol: VolModel
    t_sim: int
    seed: int

    def __post_init__(self):
        if self.t_sim < 1:
            raise DomainError("t_sim must be >= 1")
        if self.vol.n_factors != self.linear.n_factors:
            raise DimensionError("vol model and linear model disagree on M")
        if self.vol.B is None or self.vol.n_assets != self.linear.n_assets:
            raise DimensionError("vol model must carry B sized to the linear model")


def _beta_skew_exkurt(alpha: float, beta: float) -> tuple[float, float]:
    n = alpha + beta
    skew = 2.0 * (beta - alpha) * np.sqrt(n + 1.0) / ((n + 2.0) * np.sqrt(alpha * beta))
    exk = (
        6.0
        * ((alpha - beta) ** 2 * (n + 1.0) - alpha * beta * (n + 2.0))
        / (alpha * beta * (n + 2.0) * (n + 3.0))
    )
    return skew, exk


_ROOT_STARTS = (0.1, 0.3, 1.0, 3.0, 10.0, 40.0)


def match_beta(zeta0: float, kappa0: float, on_infeasible: str = "raise") -> BetaParams:
    """Find the shifted-scaled Beta with moments (0, 1, zeta0, 3 + kappa0).

    Solves for (alpha, beta) by 2-d root finding on (skewness, excess
    kurtosis), then fixes shift/scale from the mean and variance. When
    the target lies outside the Beta reach: raise InfeasibleMomentsError
    (default) or project kappa0 to the nearest attainable value.
    """
    if kappa0 < zeta0**2 - 2.0 - 1e-12:
        if on_infeasible == "project":
            return match_beta(zeta0, zeta0**2 - 2.0 + 1e-6, on_infeasible="raise")
        raise InfeasibleMomentsError(
            f"no distribution has skew {zeta0} with excess kurtosis {kappa0} "
            f"(bound kappa >= zeta^2 - 2 = {zeta0**2 - 2.0:.6g})"
        )
    if abs(zeta0) < GAUSSIAN_TOL and abs(kappa0) < GAUSSIAN_TOL:
        return BetaParams(np.inf, np.inf, 0.0, 1.0, gaussian=True)

    def residual(x):
        with np.errstate(over="ignore", invalid="ignore"):
            a, b = np.exp(np.clip(x, -30.0, 30.0))
            skew, exk = _beta_skew_exkurt(a, b)
        if not (np.isfinite(skew) and np.isfinite(exk)):
            return [1e6, 1e6]
        return [skew - zeta0, exk - kappa0]

    best = None
    for sa in _ROOT_STARTS:
        for sb in _ROOT_STARTS:
            sol = optimize.root(residual, np.log([sa, sb]), method="hybr")
            if not sol.success:
                continue
            err = float(np.max(np.abs(sol.fun)))
            if best is None or err < best[0]:
                best = (err, np.exp(sol.x))
            if err < 1e-12:
                break
        if best is not None and best[0] < 1e-12:
            break
    if best is None or best[0] > 1e-8:
        if on_infeasible == "project":
            # walk kappa toward the two-point bound until a Beta exists
            lo, hi = zeta0**2 - 2.0 + 1e-6, kappa0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                try:
                    return match_beta(zeta0, mid, on_infeasible="raise")
                except InfeasibleMomentsError:
                    lo = mid
            raise InfeasibleMomentsError(
                f"projection failed for (zeta0={zeta0}, kappa0={kappa0})"
            )
        raise InfeasibleMomentsError(
            f"(zeta0={zeta0}, kappa0={kappa0}) not reachable by a Beta law"
        )
    alpha, beta = best[1]
    mean = alpha / (alpha + beta)
    var = alpha * beta / ((alpha + beta) ** 2 * (alpha + beta + 1.0))
    scale = 1.0 / np.sqrt(var)
    return BetaParams(float(alpha), float(beta), float(-mean * scale), float(scale))


def omega0_mgf(params: BetaParams, t) -> np.ndarray | float:
    """E[exp(t * omega0)] for the matched driver (exact)."""
    t = np.asarray(t, dtype=float)
    if params.gaussian:
        out = np.exp(t**2 / 2.0)
    else:
        out = np.exp(params.shift * t) * hyp1f1(
            params.alpha, params.alpha + params.beta, params.scale * t
        )
    return float(out) if out.ndim == 0 else out


def sample_omega0(params: BetaParams, n: int, rng: np.random.Generator) -> np.ndarray:
    if params.gaussian:
        return rng.standard_normal(n)
    return params.shift + params.scale * rng.beta(params.alpha, params.beta, size=n)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    # Philox substreams: counter-based, schedule independent.
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def simulate_returns(spec: GeneratorSpec, beta_fallback: str = "gaussian") -> np.ndarray:
    """Simulate a T x N return matrix; bit-identical for identical seeds.

    ``beta_fallback`` controls infeasible (zeta0, kappa0): "gaussian"
    samples the driver as standard normal, "project" moves kappa0 to the
    nearest Beta-attainable value, "raise" propagates the error.
    """
    w = spec.linear.weights
    vol = spec.vol
    m, n = w.shape
    t = spec.t_sim
    k = vol.n_modes
    try:
        beta = match_beta(vol.zeta0, vol.kappa0)
    except InfeasibleMomentsError:
        if beta_fallback == "gaussian":
            beta = BetaParams(np.inf, np.inf, 0.0, 1.0, gaussian=True)
        elif beta_fallback == "project":
            beta = match_beta(vol.zeta0, vol.kappa0, on_infeasible="project")
        else:
            raise
    g_om0, g_om1, g_omk, g_omt, g_eps, g_eta = _streams(spec.seed, 6)

    omega0 = sample_omega0(beta, t, g_om0)
    a0, b0 = vol.A[:, 0], vol.B[:, 0]
    log_f = omega0[:, None] * a0[None, :]  # (T, M)
    log_e = omega0[:, None] * b0[None, :]  # (T, N)
    # second-moment normalizers of the exponential amplitudes
    norm_f = omega0_mgf(beta, 2.0 * a0) * np.exp(2.0 * vol.s**2)
    norm_e = omega0_mgf(beta, 2.0 * b0) * np.exp(2.0 * vol.s_tilde**2)
    if k == 2:
        omega1 = g_om1.standard_normal(t)
        a1, b1 = vol.A[:, 1], vol.B[:, 1]
        log_f += omega1[:, None] * a1[None, :]
        log_e += omega1[:, None] * b1[None, :]
        norm_f = norm_f * np.exp(2.0 * a1**2)
        norm_e = norm_e * np.exp(2.0 * b1**2)
    log_f += g_omk.standard_normal((t, m)) * vol.s[None, :]
    log_e += g_omt.standard_normal((t, n)) * vol.s_tilde[None, :]

    factors = g_eps.standard_normal((t, m)) * np.exp(log_f) / np.sqrt(norm_f)[None, :]
    resid_var = spec.linear.residual_variances(floor=0.0)
    resid_var = np.maximum(resid_var, 0.0)
    residuals = (
        g_eta.standard_normal((t, n))
        * np.exp(log_e)
        / np.sqrt(norm_e)[None, :]
        * np.sqrt(resid_var)[None, :]
    )
    return factors @ w + residuals


def simulate(spec: GeneratorSpec, beta_fallback: str = "gaussian") -> ReturnPanel:
    """Simulate and wrap as a ReturnPanel with synthetic labels."""
    returns = simulate_returns(spec, beta_fallback=beta_fallback)
    t, n = returns.shape
    dates = [f"t{i:08d}" for i in range(t)]
    assets = [f"a{j:05d}" for j in range(n)]
    return ReturnPanel(returns, dates, assets)


def _chunk_seed(seed: int, chunk: int) -> int:
    return int(np.random.SeedSequence([seed, chunk]).generate_state(1)[0])


def model_implied_abs_corr(
    spec: GeneratorSpec,
    n_samples: int = 10**5,
    chunk_size: int = 10**5,
    beta_fallback: str = "gaussian",
) -> np.ndarray:
    """Monte-Carlo estimate of corr(|r_i|, |r_j|) under the model.

    No closed form exists for general volatility parameters, so long
    simulated series are used; accumulation is chunked so n_samples can
    be large without holding the whole draw in memory.
    """
    n = spec.linear.n_assets
    s1 = np.zeros(n)
    s2 = np.zeros((n, n))
    done = 0
    chunk = 0
    while done < n_samples:
        size = min(chunk_size, n_samples - done)
        sub = replace(spec, t_sim=size, seed=_chunk_seed(spec.seed, chunk))
        absr = np.abs(simulate_returns(sub, beta_fallback=beta_fallback))
        s1 += absr.sum(axis=0)
        s2 += absr.T @ absr
        done += size
        chunk += 1
    mean = s1 / n_samples
    cov = s2 / n_samples - np.outer(mean, mean)
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr
