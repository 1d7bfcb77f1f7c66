"""Command-line entry point: calibrate, simulate, diagnose, backtest.

Configuration is a sectioned key = value file; every key has a built-in
default and the effective configuration can be dumped with
``--print-config``. Outputs are deterministic CSV files (plus optional
SVG plots), so reruns with identical config and seed are byte-identical.

Exit codes: 0 success, 2 configuration or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import sys
from importlib import metadata

import numpy as np

from . import backtest as bt
from . import diagnostics, linfactor, nlcorr, simengine, volcal
from .data import FLOAT_FMT, ReturnPanel, load_panel, save_panel, standardize
from .errors import (
    ConfigError,
    CoverageError,
    DuplicateError,
    MissingArtifactError,
    NestedFactorError,
    ParseError,
)

DEFAULT_CONFIG = {
    "io": {
        "panel": "returns.csv",
        "format": "wide",
        "artifacts_dir": "out",
    },
    "model": {
        "m": "3",
        "k": "1",
        "p_grid_min": "0.2",
        "p_grid_max": "2.0",
        "p_grid_points": "8",
        "p_star": "1.0",
        "residual_mode": "joint",
    },
    "simulate": {
        "t_sim": "10000",
    },
    "diagnose": {
        "t_sim": "100000",
        "n_bins": "12",
        "max_pairs": "2000",
    },
    "backtest": {
        "t_is": "200",
        "t_os": "20",
        "track": "linear",
        "sim_length": "100000",
        "schemes": "Empirical, LedoitWolf:0.5, Clipped:10",
        "warm_start": "false",
    },
}


def _effective_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from exc
    return cfg


def _p_grid(cfg: configparser.ConfigParser) -> tuple[float, ...]:
    lo = cfg.getfloat("model", "p_grid_min")
    hi = cfg.getfloat("model", "p_grid_max")
    pts = cfg.getint("model", "p_grid_points")
    if pts < 1 or not 0.0 < lo <= hi <= 2.0:
        raise ConfigError("p grid must be non-empty inside (0, 2]")
    return tuple(np.linspace(lo, hi, pts))


def parse_scheme(token: str) -> bt.CleaningScheme:
    """Parse "Kind", "Kind:param" or "NestedFactor:m:k"."""
    parts = [t.strip() for t in token.split(":")]
    kind = parts[0]
    try:
        if kind == "Empirical":
            return bt.CleaningScheme("Empirical")
        if kind == "LedoitWolf":
            return bt.CleaningScheme(kind, alpha=float(parts[1]))
        if kind == "NestedFactor":
            k = int(parts[2]) if len(parts) > 2 else 1
            return bt.CleaningScheme(kind, m=int(parts[1]), k=k)
        return bt.CleaningScheme(kind, m=int(parts[1]))
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad scheme spec {token!r}") from exc


def _load_input_panel(cfg: configparser.ConfigParser) -> ReturnPanel:
    path = cfg.get("io", "panel")
    if not os.path.exists(path):
        raise ConfigError(f"input panel not found: {path}")
    return load_panel(path, format=cfg.get("io", "format"))


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return FLOAT_FMT % x


def _write_series_csv(path: str, dates: list[str], mat: np.ndarray, prefix: str) -> None:
    header = ["date"] + [f"{prefix}{j}" for j in range(mat.shape[1])]
    rows = [[d] + [_fmt(x) for x in mat[i]] for i, d in enumerate(dates)]
    _write_csv(path, header, rows)


def _load_artifacts(art_dir: str) -> tuple[linfactor.LinearFactorModel, volcal.VolModel]:
    wpath = os.path.join(art_dir, "weights.csv")
    vpath = os.path.join(art_dir, "vol_model.txt")
    for p in (wpath, vpath):
        if not os.path.exists(p):
            raise MissingArtifactError(f"missing calibrated artifact: {p}")
    model, _ = linfactor.load_weights(wpath)
    vol = volcal.load_vol_model(vpath)
    return model, vol


def cmd_calibrate(cfg: configparser.ConfigParser, out: str, seed: int) -> int:
    """Full pipeline: weights, series, non-linear correlations, vol model,
    reconstructed driver. Writes six artifacts and a manifest."""
    os.makedirs(out, exist_ok=True)
    panel = standardize(_load_input_panel(cfg))
    m = cfg.getint("model", "m")
    k = cfg.getint("model", "k")
    model = linfactor.calibrate_weights(panel, m)
    series = linfactor.extract_series(panel, model)
    corr_set = nlcorr.estimate_nlcorr(series, _p_grid(cfg))
    partial = volcal.calibrate_factor_vol(corr_set, k)
    p_star = cfg.getfloat("model", "p_star")
    corr_star = corr_set
    if min(abs(p - p_star) for p in corr_set.p_grid) > 1e-9:
        corr_star = nlcorr.estimate_nlcorr(series, (p_star,))
    vol = volcal.calibrate_residual_vol(
        corr_star,
        partial,
        p_star=p_star,
        mode=cfg.get("model", "residual_mode"),
    )
    omega = volcal.reconstruct_omega(series, vol)

    artifacts = [
        "weights.csv",
        "factors.csv",
        "residuals.csv",
        "nlcorr/index.csv",
        "vol_model.txt",
        "omega.csv",
    ]
    linfactor.save_weights(model, os.path.join(out, "weights.csv"), list(panel.asset_ids))
    _write_series_csv(os.path.join(out, "factors.csv"), list(panel.dates), series.factors, "f")
    _write_series_csv(os.path.join(out, "residuals.csv"), list(panel.dates), series.residuals, "e")
    nlcorr.save_nlcorr(corr_set, os.path.join(out, "nlcorr"))
    volcal.save_vol_model(vol, os.path.join(out, "vol_model.txt"))
    volcal.save_omega(omega, list(panel.dates), os.path.join(out, "omega.csv"))
    try:
        version = metadata.version("nestedfactor")
    except metadata.PackageNotFoundError:
        version = "unknown"
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"version = {version}\n")
        fh.write(f"seed = {seed}\n")
        fh.write(f"m = {m}\nk = {k}\n")
        fh.write(f"converged_linear = {model.converged}\n")
        fh.write(f"converged_vol = {vol.converged}\n")
        for name in artifacts:
            fh.write(f"artifact = {name}\n")
    return 0


def cmd_simulate(cfg: configparser.ConfigParser, out: str, seed: int) -> int:
    """Simulate the calibrated model and write the panel plus a sample
    moment report."""
    os.makedirs(out, exist_ok=True)
    model, vol = _load_artifacts(cfg.get("io", "artifacts_dir"))
    spec = simengine.GeneratorSpec(
        linear=model, vol=vol, t_sim=cfg.getint("simulate", "t_sim"), seed=seed
    )
    panel = simengine.simulate(spec)
    save_panel(panel, os.path.join(out, "panel.csv"))
    r = panel.returns
    mean, std = r.mean(axis=0), r.std(axis=0)
    z = (r - mean) / std
    rows = [
        [
            panel.asset_ids[j],
            _fmt(mean[j]),
            _fmt(std[j]),
            _fmt((z[:, j] ** 3).mean()),
            _fmt((z[:, j] ** 4).mean() - 3.0),
        ]
        for j in range(r.shape[1])
    ]
    _write_csv(
        os.path.join(out, "moments.csv"),
        ["asset", "mean", "std", "skew", "excess_kurtosis"],
        rows,
    )
    return 0


def _plot_curve(path: str, x: np.ndarray, ys: dict[str, np.ndarray], xlabel: str, ylabel: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots()
    for label, y in ys.items():
        ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_diagnose(cfg: configparser.ConfigParser, out: str, seed: int, plots: bool) -> int:
    """Empirical vs model-implied dependence diagnostics."""
    os.makedirs(out, exist_ok=True)
    panel = standardize(_load_input_panel(cfg))
    model, vol = _load_artifacts(cfg.get("io", "artifacts_dir"))
    spec = simengine.GeneratorSpec(
        linear=model, vol=vol, t_sim=cfg.getint("diagnose", "t_sim"), seed=seed
    )
    sim = simengine.simulate_returns(spec)

    n_bins = cfg.getint("diagnose", "n_bins")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    for name, data in [("empirical", panel.returns), ("model", sim)]:
        centers, values, counts = diagnostics.blomqvist_curve(data, edges)
        rows = [
            [_fmt(centers[b]), _fmt(values[b]), str(counts[b])]
            for b in range(len(centers))
        ]
        _write_csv(
            os.path.join(out, f"blomqvist_{name}.csv"),
            ["rho_bin_center", "mean_ln_rho_ratio", "n_pairs"],
            rows,
        )

    # copula diagonals of the most correlated empirical pair
    corr = np.corrcoef(panel.returns, rowvar=False)
    np.fill_diagonal(corr, -np.inf)
    i, j = np.unravel_index(np.argmax(corr), corr.shape)
    grid = np.asarray(diagnostics.DEFAULT_DIAG_GRID)
    d_emp, a_emp = diagnostics.copula_diagonals(panel.returns[:, i], panel.returns[:, j], tuple(grid))
    d_mod, a_mod = diagnostics.copula_diagonals(sim[:, i], sim[:, j], tuple(grid))
    rows = [
        [_fmt(grid[g]), _fmt(d_emp[g]), _fmt(a_emp[g]), _fmt(d_mod[g]), _fmt(a_mod[g])]
        for g in range(len(grid))
    ]
    _write_csv(
        os.path.join(out, "copula_diagonals.csv"),
        ["p", "delta_diag_empirical", "delta_anti_empirical", "delta_diag_model", "delta_anti_model"],
        rows,
    )

    if vol.n_modes == 1 and vol.B is not None:
        max_pairs = cfg.getint("diagnose", "max_pairs")
        n = panel.n_assets
        r2 = panel.returns**2
        m2 = r2.mean(axis=0)
        rows = []
        for a in range(n):
            for b in range(a + 1, n):
                if len(rows) >= max_pairs:
                    break
                emp = float((r2[:, a] * r2[:, b]).mean() / (m2[a] * m2[b]))
                mod = diagnostics.quadratic_corr_model(model, vol, a, b)
                rows.append([str(a), str(b), _fmt(emp), _fmt(mod)])
            if len(rows) >= max_pairs:
                break
        _write_csv(
            os.path.join(out, "quadratic_scatter.csv"),
            ["i", "j", "empirical", "model"],
            rows,
        )

    if plots:
        centers, v_emp, _ = diagnostics.blomqvist_curve(panel.returns, edges)
        _, v_mod, _ = diagnostics.blomqvist_curve(sim, edges)
        _plot_curve(
            os.path.join(out, "blomqvist.svg"),
            centers,
            {"empirical": v_emp, "model": v_mod},
            "rho",
            "mean ln|rho / rho_B|",
        )
        _plot_curve(
            os.path.join(out, "copula_diagonals.svg"),
            grid,
            {"diag emp": d_emp, "anti emp": a_emp, "diag model": d_mod, "anti model": a_mod},
            "p",
            "normalized copula departure",
        )
    return 0


def _scheme_param(scheme: bt.CleaningScheme) -> str:
    if scheme.kind == "LedoitWolf":
        return _fmt(scheme.alpha)
    if scheme.kind == "Empirical":
        return ""
    if scheme.kind == "NestedFactor":
        return f"{scheme.m}/{scheme.k}"
    return str(scheme.m)


def cmd_backtest(cfg: configparser.ConfigParser, out: str, seed: int, plots: bool) -> int:
    """Sliding-window risk evaluation of the configured cleaning schemes."""
    os.makedirs(out, exist_ok=True)
    panel = _load_input_panel(cfg)
    schemes = [
        parse_scheme(tok)
        for tok in cfg.get("backtest", "schemes").split(",")
        if tok.strip()
    ]
    if not schemes:
        raise ConfigError("no cleaning schemes configured")
    config = bt.BacktestConfig(
        t_is=cfg.getint("backtest", "t_is"),
        t_os=cfg.getint("backtest", "t_os"),
        sim_length=cfg.getint("backtest", "sim_length"),
        master_seed=seed,
        p_star=cfg.getfloat("model", "p_star"),
        warm_start=cfg.getboolean("backtest", "warm_start"),
        p_grid=_p_grid(cfg),
    )
    reports = bt.run_backtest(panel, schemes, cfg.get("backtest", "track"), config)

    rows = [
        [r.scheme.kind, _scheme_param(r.scheme), _fmt(r.mean_is), _fmt(r.mean_os), str(len(r.window_risks))]
        for r in reports
    ]
    _write_csv(
        os.path.join(out, "report.csv"),
        ["scheme", "parameter", "mean_IS", "mean_OS", "n_windows"],
        rows,
    )
    detail = [
        [r.scheme.label, str(tau), _fmt(r_is), _fmt(r_os)]
        for r in reports
        for tau, r_is, r_os in r.window_risks
    ]
    _write_csv(
        os.path.join(out, "windows.csv"),
        ["scheme", "tau", "risk_IS", "risk_OS"],
        detail,
    )
    # parametric IS-vs-OS curve, one point per scheme configuration
    curve = [[r.scheme.label, _fmt(r.mean_is), _fmt(r.mean_os)] for r in reports]
    _write_csv(os.path.join(out, "is_os_curve.csv"), ["scheme", "mean_IS", "mean_OS"], curve)
    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots()
        for r in reports:
            ax.scatter([r.mean_is], [r.mean_os], label=r.scheme.label)
        ax.set_xlabel("mean in-sample risk")
        ax.set_ylabel("mean out-of-sample risk")
        ax.legend(fontsize="small")
        fig.savefig(os.path.join(out, "is_os_curve.svg"), format="svg")
        plt.close(fig)
    return 0


def _print_config(cfg: configparser.ConfigParser) -> None:
    buf = io.StringIO()
    cfg.write(buf)
    sys.stdout.write(buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestedfactor",
        description="Nested factor model calibration, simulation and backtesting.",
    )
    parser.add_argument("--config", default=None, help="path to a key = value config file")
    parser.add_argument("--seed", type=int, default=0, help="master random seed")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument(
        "--print-config", action="store_true", help="print the effective config and exit"
    )
    parser.add_argument("--no-plots", action="store_true", help="skip SVG output")
    sub = parser.add_subparsers(dest="command")
    for name in ("calibrate", "simulate", "diagnose", "backtest"):
        sub.add_parser(name)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = _effective_config(args.config)
        if args.print_config:
            _print_config(cfg)
            return 0
        if args.command is None:
            raise ConfigError("no command given (calibrate|simulate|diagnose|backtest)")
        out = args.out if args.out is not None else cfg.get("io", "artifacts_dir")
        plots = not args.no_plots
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out, args.seed)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.seed)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, out, args.seed, plots)
        return cmd_backtest(cfg, out, args.seed, plots)
    except (ConfigError, ParseError, CoverageError, DuplicateError, MissingArtifactError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NestedFactorError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
