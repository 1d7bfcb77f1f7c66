"""In-sample/out-of-sample sliding-window evaluation of correlation
cleaning schemes, for linear and absolute-return portfolios.

Windows of T_is days are used for estimation; risks are re-measured on
the following disjoint T_os days. Optimal weights follow the Markowitz
solution with an omniscient stationary predictor, normalized to unit
total gain, so the reported quadratic risk of the true correlation
matrix is 1 and pure-noise estimation gives the RMT pair
((1 - q), 1/(1 - q)) with q = N / T_is.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import linfactor, nlcorr, simengine, volcal
from .data import ReturnPanel
from .errors import (
    CalibrationError,
    ConfigError,
    DegenerateColumnError,
    DimensionError,
    DivisionByZeroError,
    DomainError,
    SingularMatrixError,
    ZeroRowError,
)

VALID_KINDS = (
    "Empirical",
    "LedoitWolf",
    "Clipped",
    "MultiFactorLinear",
    "GaussianFactor",
    "NestedFactor",
)


@dataclass(frozen=True)
class CleaningScheme:
    """One cleaning recipe with its control parameter."""

    kind: str
    alpha: float | None = None  # LedoitWolf shrinkage in [0, 1]
    m: int | None = None  # number of modes / linear factors
    k: int = 1  # volatility modes for NestedFactor

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "LedoitWolf":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ConfigError("LedoitWolf needs alpha in [0, 1]")
        elif self.kind != "Empirical" and (self.m is None or self.m < 1):
            raise ConfigError(f"{self.kind} needs a positive factor count m")

    @property
    def label(self) -> str:
        if self.kind == "Empirical":
            return "Empirical"
        if self.kind == "LedoitWolf":
            return f"LedoitWolf(alpha={self.alpha:g})"
        if self.kind == "NestedFactor":
            return f"NestedFactor(m={self.m},k={self.k})"
        return f"{self.kind}(m={self.m})"


@dataclass(frozen=True)
class BacktestConfig:
    """Window sizes and Monte-Carlo settings for run_backtest."""

    t_is: int
    t_os: int
    sim_length: int = 10**5
    master_seed: int = 0
    p_star: float = 1.0  # order used by the NestedFactor residual step
    warm_start: bool = False
    p_grid: tuple[float, ...] = nlcorr.DEFAULT_P_GRID


@dataclass
class BacktestReport:
    """Averaged risks of one scheme across the sliding windows."""

    scheme: CleaningScheme
    window_risks: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def mean_is(self) -> float:
        return float(np.mean([r[1] for r in self.window_risks]))

    @property
    def mean_os(self) -> float:
        return float(np.mean([r[2] for r in self.window_risks]))


def sliding_windows(t: int, t_is: int, t_os: int) -> list[int]:
    """1-based window anchors tau_n = T_is + n T_os + 1 fitting in t days.

    The predictor of window tau uses date tau; risk is re-measured on the
    T_os dates after it. Consecutive control segments are disjoint.
    """
    if t_is < 1 or t_os < 1 or t_is + t_os > t:
        raise ConfigError(f"no complete window: T={t}, T_is={t_is}, T_os={t_os}")
    taus = []
    n = 0
    while t_is + n * t_os + t_os <= t:
        taus.append(t_is + n * t_os + 1)
        n += 1
    return taus


def empirical_correlation(window: np.ndarray) -> np.ndarray:
    """(1/T) X'X with exact unit diagonal (X standardized in-window)."""
    t = window.shape[0]
    corr = (window.T @ window) / t
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def _ledoit_wolf(corr: np.ndarray, alpha: float) -> np.ndarray:
    n = corr.shape[0]
    off = corr[~np.eye(n, dtype=bool)]
    target = np.full((n, n), float(off.mean()))
    np.fill_diagonal(target, 1.0)
    out = alpha * corr + (1.0 - alpha) * target
    np.fill_diagonal(out, 1.0)
    return out


def _clipped(corr: np.ndarray, m: int) -> np.ndarray:
    n = corr.shape[0]
    if m >= n:
        return corr.copy()
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    flat = (n - vals[:m].sum()) / (n - m)
    new_vals = np.concatenate([vals[:m], np.full(n - m, flat)])
    return (vecs * new_vals[None, :]) @ vecs.T


def _standardized_panel(window: np.ndarray) -> ReturnPanel:
    t, n = window.shape
    dates = [f"t{i:08d}" for i in range(t)]
    assets = [f"a{j:05d}" for j in range(n)]
    from .data import standardize

    return standardize(ReturnPanel(window, dates, assets))


def _zero_vol_model(m: int, n: int) -> volcal.VolModel:
    return volcal.VolModel(
        n_modes=1,
        A=np.zeros((m, 1)),
        s=np.zeros(m),
        zeta0=0.0,
        kappa0=0.0,
        B=np.zeros((n, 1)),
        s_tilde=np.zeros(n),
    )


def clean_correlation(
    window: np.ndarray,
    scheme: CleaningScheme,
    returns_window: np.ndarray | None = None,
    rng_seed: int = 0,
    sim_length: int = 10**5,
    p_star: float = 1.0,
    p_grid: tuple[float, ...] = nlcorr.DEFAULT_P_GRID,
    start_model: linfactor.LinearFactorModel | None = None,
) -> np.ndarray:
    """Apply one cleaning scheme to an in-sample window.

    ``window`` holds the portfolio assets (returns or transformed
    absolute returns, standardized in-window); model-based schemes
    calibrate on ``returns_window`` (defaults to ``window``).
    """
    n = window.shape[1]
    if returns_window is None:
        returns_window = window
    if scheme.kind == "Empirical":
        return empirical_correlation(window)
    if scheme.kind == "LedoitWolf":
        return _ledoit_wolf(empirical_correlation(window), scheme.alpha)
    if scheme.kind == "Clipped":
        return _clipped(empirical_correlation(window), min(scheme.m, n))
    m = min(scheme.m, n)
    try:
        panel = _standardized_panel(returns_window)
        model = linfactor.calibrate_weights(panel, m, start=start_model)
        if scheme.kind == "MultiFactorLinear":
            return linfactor.model_correlation(model)
        if scheme.kind == "GaussianFactor":
            vol = _zero_vol_model(m, n)
        else:  # NestedFactor
            series = linfactor.extract_series(panel, model)
            corr_set = nlcorr.estimate_nlcorr(series, p_grid)
            partial = volcal.calibrate_factor_vol(corr_set, scheme.k)
            corr_star = corr_set
            if min(abs(p - p_star) for p in corr_set.p_grid) > 1e-9:
                corr_star = nlcorr.estimate_nlcorr(series, (p_star,))
            vol = volcal.calibrate_residual_vol(corr_star, partial, p_star=p_star)
        spec = simengine.GeneratorSpec(linear=model, vol=vol, t_sim=1, seed=rng_seed)
        return simengine.model_implied_abs_corr(spec, n_samples=sim_length)
    except (np.linalg.LinAlgError, DomainError) as exc:
        raise CalibrationError(f"{scheme.label}: {exc}") from exc


def optimal_weights(corr: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Markowitz weights corr^{-1} g / (g' corr^{-1} g); unit total gain."""
    corr = np.asarray(corr, float)
    g = np.asarray(g, float)
    if corr.shape[0] != corr.shape[1] or corr.shape[0] != g.shape[0]:
        raise DimensionError("correlation/predictor dimensions disagree")
    work = corr
    if np.linalg.cond(corr) > 1e12:
        work = corr + 1e-8 * np.eye(corr.shape[0])
    try:
        raw = np.linalg.solve(work, g)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("correlation matrix not invertible") from exc
    denom = float(g @ raw)
    if denom == 0.0 or not np.isfinite(denom):
        raise SingularMatrixError("degenerate Markowitz normalization")
    return raw / denom


def omniscient_predictor(row: np.ndarray) -> np.ndarray:
    """g_i = Y_i / sqrt((1/N) sum_j Y_j^2); scale-invariant."""
    row = np.asarray(row, float)
    rms = np.sqrt(np.mean(row**2))
    if rms == 0.0:
        raise ZeroRowError("predictor row is identically zero")
    return row / rms


def risk(weights: np.ndarray, eval_panel: np.ndarray, sigma_is: np.ndarray) -> float:
    """Average quadratic portfolio fluctuation, normalized so the true
    correlation matrix scores 1:

        R^2 = (N / T') sum_t ( sum_i Y_ti w_i / sigma_i^IS )^2
    """
    y = np.atleast_2d(np.asarray(eval_panel, float))
    weights = np.asarray(weights, float)
    sigma_is = np.asarray(sigma_is, float)
    if y.shape[1] != weights.shape[0] or weights.shape != sigma_is.shape:
        raise DimensionError("risk input dimensions disagree")
    if np.any(sigma_is <= 0):
        raise DimensionError("sigma_is entries must be positive")
    port = y @ (weights / sigma_is)
    return float(y.shape[1] * np.mean(port**2))


def abs_return_transform(panel: ReturnPanel) -> np.ndarray:
    """Centered, unit-variance absolute returns (population denominator)."""
    mat, _, _ = _abs_transform_with_params(panel.returns)
    return mat


def _abs_transform_with_params(
    is_matrix: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.abs(is_matrix)
    mean = a.mean(axis=0)
    centered = a - mean
    std = np.sqrt((centered**2).mean(axis=0))
    if np.any(std <= 0):
        raise DegenerateColumnError("constant |return| column in window")
    return centered / std, mean, std


def rmt_benchmark(q: float) -> tuple[float, float]:
    """Pure-noise Wishart prediction ((1 - q), 1/(1 - q)) for q = N/T_is."""
    if not 0.0 <= q < 1.0:
        raise DomainError(f"quality factor q={q} outside [0, 1)")
    return 1.0 - q, 1.0 / (1.0 - q)


def relative_gain(r_clip: float, r_mf: float) -> float:
    """(R2_clip - R2_mf) / (R2_clip - 1), with true risk 1."""
    if r_clip == 1.0:
        raise DivisionByZeroError("clipping risk equals the true risk")
    return (r_clip - r_mf) / (r_clip - 1.0)


def over_perf(r_fng: float, r_fg: float) -> float:
    """(R2_FnG - R2_FG) / (R2_FnG - 1), with true risk 1."""
    if r_fng == 1.0:
        raise DivisionByZeroError("non-Gaussian factor risk equals the true risk")
    return (r_fng - r_fg) / (r_fng - 1.0)


def _window_seed(master_seed: int, tau: int, label: str) -> int:
    key = zlib.crc32(label.encode("utf-8"))
    return int(np.random.SeedSequence([master_seed, tau, key]).generate_state(1)[0])


def run_backtest(
    panel: ReturnPanel,
    schemes: list[CleaningScheme],
    track: str,
    config: BacktestConfig,
) -> list[BacktestReport]:
    """Run the sliding-window protocol for every scheme.

    track "linear" evaluates portfolios of returns; track "absolute"
    evaluates portfolios of centered normalized absolute returns, with
    the transform parameters fitted in-sample.
    """
    if track not in ("linear", "absolute"):
        raise ConfigError(f"unknown track {track!r}")
    r = panel.returns
    t = r.shape[0]
    taus = sliding_windows(t, config.t_is, config.t_os)
    reports = [BacktestReport(scheme=s) for s in schemes]
    warm: dict[str, linfactor.LinearFactorModel] = {}
    for tau in taus:
        # date tau (1-based) is row tau - 1; the predictor uses date tau,
        # out-of-sample risk the T_os dates after it
        is_rows = slice(tau - 1 - config.t_is, tau - 1)
        os_rows = slice(tau, min(tau + config.t_os, t))
        r_is, r_os = r[is_rows], r[os_rows]
        if track == "linear":
            sigma_is = r_is.std(axis=0)
            if np.any(sigma_is <= 0):
                raise DegenerateColumnError("constant return column in window")
            x_is = (r_is - r_is.mean(axis=0)) / sigma_is
            y_is, y_os = r_is, r_os
            g_row = r[tau - 1]
            window, returns_window = x_is, x_is
        else:
            y_is, mean, std = _abs_transform_with_params(r_is)
            y_os = (np.abs(r_os) - mean) / std
            sigma_is = np.ones(r.shape[1])
            g_row = (np.abs(r[tau - 1]) - mean) / std
            lin_sigma = r_is.std(axis=0)
            if np.any(lin_sigma <= 0):
                raise DegenerateColumnError("constant return column in window")
            returns_window = (r_is - r_is.mean(axis=0)) / lin_sigma
            window = y_is
        g = omniscient_predictor(g_row)
        for scheme, report in zip(schemes, reports):
            start = warm.get(scheme.label) if config.warm_start else None
            cleaned = clean_correlation(
                window,
                scheme,
                returns_window=returns_window,
                rng_seed=_window_seed(config.master_seed, tau, scheme.label),
                sim_length=config.sim_length,
                p_star=config.p_star,
                p_grid=config.p_grid,
                start_model=start,
            )
            weights = optimal_weights(cleaned, g)
            r2_is = risk(weights, y_is, sigma_is)
            r2_os = risk(weights, y_os, sigma_is)
            report.window_risks.append((tau, r2_is, r2_os))
    return reports
