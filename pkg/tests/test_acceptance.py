"""Acceptance suite: twelve numbered criteria, each printing a single
PASS/FAIL line. Every criterion asserts at its stated tolerance; a FAIL
line therefore comes with a failing test."""

import os
from dataclasses import replace

import numpy as np
import pytest

from nestedfactor import backtest, cli, diagnostics, linfactor, nlcorr, simengine, volcal
from nestedfactor.backtest import BacktestConfig, CleaningScheme, run_backtest
from nestedfactor.data import ReturnPanel, save_panel, standardize
from nestedfactor.volcal import VolModel, gamma_p


@pytest.fixture(name="report")
def report_fixture(capfd):
    """One PASS/FAIL line per criterion, printed past output capture."""

    def report(num: int, ok: bool, detail: str = "") -> None:
        line = f"ACCEPTANCE {num:2d}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  ({detail})"
        with capfd.disabled():
            print(line, flush=True)
        assert ok, line

    return report


def _one_mode_vol(m, n, a, b, s, st, zeta=0.0, kappa=0.0):
    return VolModel(
        n_modes=1,
        A=np.full((m, 1), a) if np.isscalar(a) else np.asarray(a).reshape(m, 1),
        s=np.full(m, s) if np.isscalar(s) else np.asarray(s),
        zeta0=zeta,
        kappa0=kappa,
        B=np.full((n, 1), b) if np.isscalar(b) else np.asarray(b).reshape(n, 1),
        s_tilde=np.full(n, st) if np.isscalar(st) else np.asarray(st),
    )


def _mc_quad_moment(spec, i, j, n_samples, chunk=10**6):
    """Chunked Monte-Carlo mean and standard error of r_i^2 r_j^2."""
    s1 = s2 = 0.0
    done = c = 0
    while done < n_samples:
        size = min(chunk, n_samples - done)
        seed = int(np.random.SeedSequence([spec.seed, c]).generate_state(1)[0])
        r = simengine.simulate_returns(replace(spec, t_sim=size, seed=seed))
        x = r[:, i] ** 2 * r[:, j] ** 2
        s1 += float(x.sum())
        s2 += float((x * x).sum())
        done += size
        c += 1
    mean = s1 / n_samples
    var = max(s2 / n_samples - mean**2, 0.0)
    return mean, np.sqrt(var / n_samples)


def test_criterion_01_gamma_values(report):
    err1 = abs(gamma_p(1.0) - np.log(np.pi / 2.0))
    err0 = abs(gamma_p(1e-4) - np.pi**2 / 8.0)
    ok = err1 < 1e-12 and err0 < 1e-6
    report(1, ok, f"|gamma(1) - ln(pi/2)| = {err1:.2e}, |gamma(1e-4) - pi^2/8| = {err0:.2e}")


def test_criterion_02_gaussian_limit_p_independent(report):
    rng = np.random.default_rng(2)
    vol = _one_mode_vol(3, 5, rng.uniform(0.1, 0.5, 3), rng.uniform(0.1, 0.5, 5), 0.1, 0.2)
    grid = np.linspace(0.2, 2.0, 8)
    offs = []
    cfrs = []
    for p in grid:
        cff, cfr, _ = volcal.model_nlcorr(vol, p)
        offs.append(cff[~np.eye(3, dtype=bool)])
        cfrs.append(cfr.ravel())
    spread = max(np.ptp(np.array(offs), axis=0).max(), np.ptp(np.array(cfrs), axis=0).max())
    report(2, spread <= 1e-14, f"max off-diagonal spread over p grid = {spread:.2e}")


def test_criterion_03_quadratic_oracle_random_instances(report):
    rng = np.random.default_rng(3)
    n, m = 4, 2
    hits = 0
    worst = 0.0
    for inst in range(20):
        w = rng.uniform(0.0, 0.5, (m, n))
        vol = _one_mode_vol(
            m, n, rng.uniform(0.0, 0.5, m), rng.uniform(0.0, 0.5, n),
            rng.uniform(0.0, 0.3, m), rng.uniform(0.0, 0.3, n),
        )
        linear = linfactor.LinearFactorModel(weights=w)
        i, j = sorted(rng.choice(n, size=2, replace=False))
        spec = simengine.GeneratorSpec(linear=linear, vol=vol, t_sim=1, seed=100 + inst)
        mc, se = _mc_quad_moment(spec, i, j, 10**7)
        exact = diagnostics.quadratic_corr_model(linear, vol, int(i), int(j))
        dev = abs(mc - exact) / se
        worst = max(worst, dev)
        if dev <= 3.0:
            hits += 1
    report(3, hits >= 19, f"{hits}/20 within 3 SE, worst deviation {worst:.2f} SE")


def test_criterion_04_gaussian_baseline(report):
    rng = np.random.default_rng(4)
    w = rng.uniform(0.1, 0.5, (2, 4))
    linear = linfactor.LinearFactorModel(weights=w)
    vol = _one_mode_vol(2, 4, 0.0, 0.0, 0.0, 0.0)
    rho = w.T @ w
    analytic_ok = True
    for i in range(4):
        for j in range(4):
            expected = 3.0 if i == j else 1.0 + 2.0 * rho[i, j] ** 2
            got = diagnostics.quadratic_corr_model(linear, vol, i, j)
            analytic_ok &= abs(got - expected) <= 1e-12 * expected
    spec = simengine.GeneratorSpec(linear=linear, vol=vol, t_sim=1, seed=44)
    mc, se = _mc_quad_moment(spec, 0, 1, 10**7)
    mc_dev = abs(mc - (1.0 + 2.0 * rho[0, 1] ** 2)) / se
    ok = analytic_ok and mc_dev <= 3.0
    report(4, ok, f"analytic exact: {analytic_ok}, MC deviation {mc_dev:.2f} SE")


def test_criterion_05_elliptical_medial_law(report):
    rng = np.random.default_rng(5)
    t, n = 10**6, 12
    beta = np.linspace(0.55, 0.97, n)
    z = rng.standard_normal((t, 1))
    u = rng.standard_normal((t, n))
    sigma = np.exp(0.4 * rng.standard_normal((t, 1)))
    r = sigma * (beta * z + np.sqrt(1.0 - beta**2) * u)
    edges = np.linspace(0.25, 1.0, 9)
    _, values, counts = diagnostics.blomqvist_curve(r, edges)
    worst = float(np.max(np.abs(values[counts > 0])))
    report(5, worst <= 0.02, f"max |binned ln(rho/rho_B)| = {worst:.4f}")


def test_criterion_06_nested_copula_departure(report):
    n = 14
    w = np.linspace(0.15, 0.95, n)[None, :]
    linear = linfactor.LinearFactorModel(weights=w)
    vol = _one_mode_vol(1, n, 0.5, 0.5, 0.0, 0.3, zeta=0.0, kappa=-0.6)
    spec = simengine.GeneratorSpec(linear=linear, vol=vol, t_sim=4 * 10**5, seed=21)
    r = simengine.simulate_returns(spec)
    edges = np.linspace(0.0, 1.0, 11)
    centers, values, counts = diagnostics.blomqvist_curve(r, edges)
    filled = counts > 0
    c, v = centers[filled], np.abs(values[filled])
    low = v[c < 0.3]
    high = v[c > 0.85]
    monotone = bool(np.all(np.diff(v) <= 0.01))
    ok = low.size > 0 and bool(np.all(low > 0.05)) and high.size > 0 and bool(
        np.all(high < 0.05)
    ) and monotone
    report(
        6,
        ok,
        f"|curve| {v[0]:.3f} at rho {c[0]:.2f} -> {v[-1]:.3f} at rho {c[-1]:.2f}, "
        f"monotone: {monotone}",
    )


def test_criterion_07_synthetic_round_trip(report):
    n, m, t = 50, 3, 10000
    rng = np.random.default_rng(42)
    w = rng.uniform(0.3, 0.8, (m, n))
    w /= np.sqrt((w**2).sum(axis=0)) / 0.9
    linear = linfactor.LinearFactorModel(weights=w)
    vol_true = _one_mode_vol(m, n, 0.4, 0.3, 0.2, 0.2, zeta=-0.5, kappa=-0.8)
    spec = simengine.GeneratorSpec(linear=linear, vol=vol_true, t_sim=t, seed=11)
    panel = standardize(simengine.simulate(spec))

    model = linfactor.calibrate_weights(panel, m)
    series = linfactor.extract_series(panel, model)
    corr_set = nlcorr.estimate_nlcorr(series)
    partial = volcal.calibrate_factor_vol(corr_set, 1)
    corr_star = nlcorr.estimate_nlcorr(series, (1.0,))
    full = volcal.calibrate_residual_vol(corr_star, partial, p_star=1.0)
    omega = volcal.reconstruct_omega(series, full)

    a_cos = abs(full.A[:, 0] @ np.full(m, 0.4)) / (np.linalg.norm(full.A[:, 0]) * 0.4 * np.sqrt(m))
    b_cos = abs(full.B[:, 0] @ np.full(n, 0.3)) / (np.linalg.norm(full.B[:, 0]) * 0.3 * np.sqrt(n))
    zeta_err = abs(full.zeta0 - (-0.5))
    kappa_err = abs(full.kappa0 - (-0.8))
    om_true = simengine.sample_omega0(
        simengine.match_beta(-0.5, -0.8), t, simengine._streams(11, 6)[0]
    )
    om_corr = float(np.corrcoef(omega.omega0, om_true)[0, 1])
    ok = a_cos > 0.95 and b_cos > 0.95 and zeta_err <= 0.3 and kappa_err <= 0.3 and om_corr > 0.8
    report(
        7,
        ok,
        f"cos(A) {a_cos:.3f}, cos(B) {b_cos:.3f}, |dzeta| {zeta_err:.2f}, "
        f"|dkappa| {kappa_err:.2f}, omega corr {om_corr:.3f}",
    )


def test_criterion_08_gradient_checks(report):
    rng = np.random.default_rng(8)
    worst = 0.0
    ok = True
    eps = 1e-6

    def check(fun, theta):
        nonlocal worst, ok
        _, grad = fun(theta)
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += eps
            tm[i] -= eps
            num = (fun(tp)[0] - fun(tm)[0]) / (2 * eps)
            rel = abs(grad[i] - num) / max(1.0, abs(num))
            worst = max(worst, rel)
            ok &= rel <= 1e-5

    for _ in range(10):
        corr = rng.standard_normal((5, 5))
        corr = corr @ corr.T / 5
        np.fill_diagonal(corr, 1.0)
        w = rng.uniform(-0.5, 0.5, (2, 5))
        check(
            lambda th: (
                linfactor.offdiag_loss(th.reshape(2, 5), corr),
                linfactor.offdiag_loss_grad(th.reshape(2, 5), corr).ravel(),
            ),
            w.ravel(),
        )
    grid = (0.4, 1.0, 1.6)
    for _ in range(10):
        m = 3
        cff = rng.standard_normal((len(grid), m, m))
        cff = 0.5 * (cff + cff.transpose(0, 2, 1))
        theta = rng.uniform(-0.5, 0.5, m + m + 2)
        theta[m : 2 * m] = np.abs(theta[m : 2 * m])
        check(lambda th: volcal.factor_vol_loss_grad(th, cff, grid, 1), theta)
    report(8, ok, f"worst relative gradient error {worst:.2e}")


def test_criterion_09_rmt_benchmark(report):
    n, t_is, t_os, nwin = 100, 200, 20, 55
    t = t_is + nwin * t_os + 1
    rng = np.random.default_rng(3)
    panel = ReturnPanel(
        rng.standard_normal((t, n)),
        [f"d{i:06d}" for i in range(t)],
        [f"a{j:04d}" for j in range(n)],
    )
    config = BacktestConfig(t_is=t_is, t_os=t_os)
    (rep,) = run_backtest(panel, [CleaningScheme("Empirical")], "linear", config)
    is_bench, os_bench = backtest.rmt_benchmark(n / t_is)
    ok = (
        len(rep.window_risks) >= 50
        and abs(rep.mean_is - is_bench) <= 0.1 * is_bench
        and abs(rep.mean_os - os_bench) <= 0.1 * os_bench
    )
    report(
        9,
        ok,
        f"{len(rep.window_risks)} windows, IS {rep.mean_is:.3f} vs {is_bench}, "
        f"OS {rep.mean_os:.3f} vs {os_bench}",
    )


def test_criterion_10_collapse_and_budget_invariants(report):
    rng = np.random.default_rng(10)
    n, t = 12, 161
    panel = ReturnPanel(
        rng.standard_normal((t, n)),
        [f"d{i:06d}" for i in range(t)],
        [f"a{j:04d}" for j in range(n)],
    )
    config = BacktestConfig(t_is=40, t_os=30)
    schemes = [
        CleaningScheme("Empirical"),
        CleaningScheme("Clipped", m=n),
        CleaningScheme("LedoitWolf", alpha=1.0),
    ]
    reports = run_backtest(panel, schemes, "linear", config)
    base = reports[0].window_risks
    collapse = max(
        abs(a - b)
        for other in reports[1:]
        for (_, a1, a2), (_, b1, b2) in zip(base, other.window_risks)
        for a, b in ((a1, b1), (a2, b2))
    )
    budget = 0.0
    trace_err = 0.0
    for _ in range(25):
        x = rng.standard_normal((60, n))
        x = (x - x.mean(0)) / x.std(0)
        corr = backtest.empirical_correlation(x)
        g = backtest.omniscient_predictor(rng.standard_normal(n))
        w = backtest.optimal_weights(corr, g)
        budget = max(budget, abs(float(g @ w) - 1.0))
        m = int(rng.integers(1, n))
        trace_err = max(trace_err, abs(np.trace(backtest._clipped(corr, m)) - n))
    ok = collapse <= 1e-10 and budget <= 1e-10 and trace_err <= 1e-9
    report(
        10,
        ok,
        f"scheme collapse {collapse:.1e}, |g'w - 1| {budget:.1e}, "
        f"clipped trace error {trace_err:.1e}",
    )


def test_criterion_11_nested_below_gaussian_ordering(report):
    n, m_true = 50, 5
    rng = np.random.default_rng(77)
    w = np.zeros((m_true, n))
    # sector-ish structure: one broad mode + block modes
    w[0] = rng.uniform(0.3, 0.6, n)
    for k in range(1, m_true):
        blk = slice((k - 1) * 12, min((k - 1) * 12 + 14, n))
        w[k, blk] = rng.uniform(0.3, 0.6, w[k, blk].shape)
    norms = np.sqrt((w**2).sum(axis=0))
    w *= np.minimum(1.0, 0.92 / norms)
    linear = linfactor.LinearFactorModel(weights=w)
    vol = _one_mode_vol(m_true, n, 0.5, 0.4, 0.2, 0.3, zeta=-0.4, kappa=-0.4)
    t_is, t_os, nwin = 150, 50, 4
    t = t_is + nwin * t_os + 1
    spec = simengine.GeneratorSpec(linear=linear, vol=vol, t_sim=t, seed=31)
    panel = simengine.simulate(spec)
    config = BacktestConfig(t_is=t_is, t_os=t_os, sim_length=4 * 10**4, master_seed=5)
    results = {}
    for m in (3, 5, 8):
        nested, gauss = run_backtest(
            panel,
            [CleaningScheme("NestedFactor", m=m), CleaningScheme("GaussianFactor", m=m)],
            "absolute",
            config,
        )
        results[m] = backtest.over_perf(nested.mean_os, gauss.mean_os)
    ok = all(v < 0.0 for v in results.values())
    detail = ", ".join(f"m={m}: over_perf {v:+.3f}" for m, v in results.items())
    report(11, ok, detail)


def test_criterion_12_cli_determinism(tmp_path, report):
    rng = np.random.default_rng(12)
    t, n, m = 400, 10, 2
    w = rng.uniform(0.3, 0.6, (m, n))
    linear = linfactor.LinearFactorModel(weights=w)
    vol = _one_mode_vol(m, n, 0.3, 0.25, 0.15, 0.2)
    spec = simengine.GeneratorSpec(linear=linear, vol=vol, t_sim=t, seed=7)
    panel_file = str(tmp_path / "returns.csv")
    save_panel(simengine.simulate(spec), panel_file)
    cfg_file = str(tmp_path / "run.cfg")
    with open(cfg_file, "w", encoding="utf-8") as fh:
        fh.write(f"[io]\npanel = {panel_file}\n")
        fh.write("[model]\nm = 2\n")
        fh.write("[backtest]\nt_is = 100\nt_os = 100\nschemes = Empirical, Clipped:2\n")

    def run(cmd, out):
        assert cli.main(["--config", cfg_file, "--out", out, "--no-plots", cmd]) == 0

    mismatches = []
    for cmd, files in [
        ("calibrate", ["weights.csv", "factors.csv", "residuals.csv", "vol_model.txt", "omega.csv"]),
        ("backtest", ["report.csv", "windows.csv", "is_os_curve.csv"]),
    ]:
        out1, out2 = str(tmp_path / f"{cmd}1"), str(tmp_path / f"{cmd}2")
        run(cmd, out1)
        run(cmd, out2)
        for name in files:
            with open(os.path.join(out1, name), "rb") as fh:
                b1 = fh.read()
            with open(os.path.join(out2, name), "rb") as fh:
                b2 = fh.read()
            if b1 != b2:
                mismatches.append(f"{cmd}/{name}")
    ok = not mismatches
    report(12, ok, "all reruns byte-identical" if ok else "differs: " + ", ".join(mismatches))
