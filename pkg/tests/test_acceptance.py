"""Acceptance criteria 1-9 at their stated scales and tolerances.

Each test records a one-line verdict, printed in the terminal summary.
``NSLGCP_ACCEPTANCE_SCALE`` (default 1) multiplies the replicate counts for
quick local runs; a reduced scale is stated on the verdict line.
"""

import hashlib
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import integrate

from nslgcp.coxsim import LGCPSimulator, LogLinearIntensity, simulate_conditional_poisson
from nslgcp.geometry import CovariateField, Grid, PointPattern, Window, partition_by_covariate
from nslgcp.gof import default_r_grid, envelope_test, make_statistic
from nslgcp.intensity import EstimationError, fit_cl1
from nslgcp.parallel import default_workers
from nslgcp.randomfield import ExponentialCorrelation, FieldModel, IdentityMap, LinearStd, RadialLogMap, replicate_rng
from nslgcp.scenarios import DISPERSAL_WINDOW, dispersal_scenario, fish_scenario
from nslgcp.secondorder import build_stieltjes, g0_exponential
from nslgcp.study import gamma1_test_study, rmsle_compare, run_series

from oracles import dense_cell_pair_integral

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SCALE = float(os.environ.get("NSLGCP_ACCEPTANCE_SCALE", "1"))
WORKERS = default_workers()


def scaled(n: int, floor: int = 2) -> int:
    return max(floor, int(round(n * SCALE)))


def verdict(criteria, n: int, ok: bool, detail: str) -> None:
    note = "" if SCALE == 1 else f" [scale {SCALE:g}]"
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}{note} - {detail}"
    criteria[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. moment identities
# ---------------------------------------------------------------------------


def test_criterion_1_moments(criteria):
    w = Window.rectangle((0, 2), (0, 1))
    grid = Grid.for_window(w, cell=0.05)

    def depth(p):
        return 5.0 + 12.0 * (1.0 - np.cos(np.pi * p[:, 0] / 2.0))

    z = CovariateField.from_function(grid, depth, "depth")
    beta = (math.log(100.0), -0.02)
    sigma, alpha = 1.25, 0.5
    rho = LogLinearIntensity(beta, [z])
    fm = FieldModel(LinearStd(sigma, 0.0, z), IdentityMap(), ExponentialCorrelation(alpha))
    sim = LGCPSimulator(rho, fm, w, grid)
    A, B = ((0.0, 0.8), (0.0, 1.0)), ((1.2, 2.0), (0.0, 1.0))

    def inside(p, box):
        (x0, x1), (y0, y1) = box
        return np.count_nonzero((p[:, 0] >= x0) & (p[:, 0] < x1) & (p[:, 1] >= y0) & (p[:, 1] < y1))

    n = scaled(2000, 50)
    counts = np.empty((n, 3))
    for i in range(n):
        p = sim.simulate(replicate_rng(1, i)).points
        counts[i] = len(p), inside(p, A), inside(p, B)

    def rho_x(x):
        return math.exp(beta[0] + beta[1] * (5.0 + 12.0 * (1.0 - math.cos(math.pi * x / 2.0))))

    mean_ref = integrate.quad(rho_x, 0, 2, epsabs=1e-12, epsrel=1e-12)[0]
    mean_se = counts[:, 0].std(ddof=1) / math.sqrt(n)
    ok_mean = abs(counts[:, 0].mean() - mean_ref) < 4 * mean_se

    # covariance: product Gauss rule on A x B of rho rho (exp(c) - 1)
    xg, wg = np.polynomial.legendre.leggauss(24)

    def nodes(box):
        (x0, x1), (y0, y1) = box
        x = 0.5 * (x1 - x0) * (xg + 1) + x0
        y = 0.5 * (y1 - y0) * (xg + 1) + y0
        X, Y = np.meshgrid(x, y, indexing="ij")
        W = np.outer(wg, wg) * 0.25 * (x1 - x0) * (y1 - y0)
        P = np.column_stack([X.ravel(), Y.ravel()])
        return P, W.ravel() * np.array([rho_x(v) for v in P[:, 0]])

    PA, WA = nodes(A)
    PB, WB = nodes(B)
    d = np.hypot(PA[:, None, 0] - PB[None, :, 0], PA[:, None, 1] - PB[None, :, 1])
    cov_ref = float(WA @ np.expm1(sigma**2 * np.exp(-alpha * d)) @ WB)
    dA, dB = counts[:, 1] - counts[:, 1].mean(), counts[:, 2] - counts[:, 2].mean()
    prod = dA * dB
    cov = prod.sum() / (n - 1)
    cov_se = prod.std(ddof=1) / math.sqrt(n)
    ok_cov = abs(cov - cov_ref) < 5 * cov_se
    verdict(criteria, 1, ok_mean and ok_cov,
            f"mean count {counts[:, 0].mean():.2f} vs {mean_ref:.2f} (4se {4 * mean_se:.2f}); "
            f"cov {cov:.1f} vs {cov_ref:.1f} (5se {5 * cov_se:.1f}); {n} patterns")


# ---------------------------------------------------------------------------
# 2. Lebesgue-Stieltjes oracle
# ---------------------------------------------------------------------------


def test_criterion_2_stieltjes(criteria):
    errs = []
    for k in range(3):
        rng = np.random.default_rng(200 + k)
        w = Window.rectangle((0, rng.uniform(6, 12)), (0, rng.uniform(3, 6)))
        grid = Grid.for_window(w, cells_across=12)
        c = grid.centers()
        a, b, ph = rng.uniform(0.5, 2.0, 2).tolist() + [rng.uniform(0, 6)]
        rho = np.exp(0.8 * np.sin(a * c[:, 0] + ph) * np.cos(b * c[:, 1])).reshape(grid.shape)
        mask = (c[:, 0] < w.bbox[2] * rng.uniform(0.5, 0.9)).reshape(grid.shape)
        R = rng.uniform(1.5, 4.0)
        g0 = g0_exponential(rng.uniform(0.5, 2.0), rng.uniform(0.3, 3.0))
        got = build_stieltjes(rho, grid, mask, R, 512).integrate(g0)
        ref = dense_cell_pair_integral(rho, grid, mask, R, g0, n=120)
        errs.append(abs(got / ref - 1))
    verdict(criteria, 2, max(errs) < 1e-3, "relative errors " + ", ".join(f"{e:.1e}" for e in errs))


# ---------------------------------------------------------------------------
# 3. first-order composite likelihood
# ---------------------------------------------------------------------------


def test_criterion_3_cl1(criteria):
    w = Window.rectangle((0, 1), (0, 1))
    grid = Grid.for_window(w, cells_across=100)
    x = CovariateField.from_function(grid, lambda p: p[:, 0], "x")
    rho = LogLinearIntensity([2.0, -1.0], [x])
    n = scaled(200, 20)
    est, empty = [], 0
    for i in range(n):
        pat = simulate_conditional_poisson(rho, w, replicate_rng(3, i), grid=grid)
        try:
            est.append(fit_cl1(pat, [x]).beta)
        except EstimationError:
            empty += 1  # no events: the estimate does not exist
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    z = (est.mean(axis=0) - [2.0, -1.0]) / se
    ok_rec = bool(np.all(np.abs(z) < 3))

    worst = 0.0
    rng = np.random.default_rng(33)
    for _ in range(50):
        wd, ht = rng.uniform(0.5, 50, 2)
        m = int(rng.integers(1, 500))
        win = Window.rectangle((0, wd), (0, ht))
        pat = PointPattern(rng.uniform([0, 0], [wd, ht], size=(m, 2)), win)
        worst = max(worst, abs(fit_cl1(pat).beta[0] - math.log(m / (wd * ht))))
    verdict(criteria, 3, ok_rec and worst < 1e-8,
            f"mean beta {np.round(est.mean(axis=0), 3).tolist()} at {np.round(z, 2).tolist()} se "
            f"({len(est)} fits, {empty} empty patterns); closed form max error {worst:.1e}")


# ---------------------------------------------------------------------------
# 4. intensity of the transformed pattern
# ---------------------------------------------------------------------------


def test_criterion_4_transformed_law(criteria):
    sc = dispersal_scenario(1, count_range=None)
    phi = RadialLogMap(sc.truth["delta"])
    b0, b1 = sc.truth["beta0"], sc.truth["beta1"]
    (x0, x1), (y0, y1) = DISPERSAL_WINDOW
    s_top = math.log1p(phi.delta * math.hypot(x1, y1))
    edges = np.linspace(0, s_top, 9)

    # law: sum over the transformed window of exp(log|D phi^-1| + b0 + b1 |phi^-1(u)|), polar midpoint rule
    nt, ns = 4000, 400
    th = (np.arange(nt) + 0.5) * 2 * math.pi / nt
    rmax = np.minimum(x1 / np.maximum(np.abs(np.cos(th)), 1e-300), y1 / np.maximum(np.abs(np.sin(th)), 1e-300))
    smax = np.log1p(phi.delta * rmax)
    expected = np.empty(len(edges) - 1)
    for k in range(len(expected)):
        s = edges[k] + (np.arange(ns) + 0.5) * (edges[k + 1] - edges[k]) / ns
        S, T = np.meshgrid(s, th, indexing="ij")
        u = np.column_stack([(S * np.cos(T)).ravel(), (S * np.sin(T)).ravel()])
        dens = np.exp(np.log(phi.jacobian_inverse(u)) + b0 + b1 * np.hypot(*phi.inverse(u).T))
        ok = (S <= smax[None, :]).ravel()
        expected[k] = np.sum((dens * S.ravel())[ok]) * (edges[k + 1] - edges[k]) / ns * 2 * math.pi / nt

    n = scaled(1000, 50)
    counts = np.empty((n, len(expected)))
    for i in range(n):
        img = phi.forward(sc.simulate(replicate_rng(4, i)).points)
        counts[i] = np.histogram(np.hypot(img[:, 0], img[:, 1]), edges)[0]
    se = counts.std(axis=0, ddof=1) / math.sqrt(n)
    zs = (counts.mean(axis=0) - expected) / se
    ok_law = bool(np.all(np.abs(zs) < 4))

    worst = 0.0
    rng = np.random.default_rng(44)
    h = 1e-6
    for delta in (0.5, 1.0, 10.0):
        m = RadialLogMap(delta)
        for p in rng.uniform(-2, 2, size=(200, 2)):
            J = np.column_stack([(m.inverse(p + e) - m.inverse(p - e)) / (2 * h) for e in np.eye(2) * h])
            worst = max(worst, abs(m.jacobian_inverse(p)[0] / abs(np.linalg.det(J)) - 1))
    verdict(criteria, 4, ok_law and worst < 1e-6,
            f"max |z| per bin {np.abs(zs).max():.2f} over {len(zs)} bins ({n} patterns); "
            f"Jacobian vs finite differences max rel {worst:.1e}")


# ---------------------------------------------------------------------------
# 5. fish recovery
# ---------------------------------------------------------------------------


def test_criterion_5_fish_recovery(criteria):
    n = scaled(100, 5)
    parts, ok = [], True
    for s in (1, 5):
        sc = fish_scenario(s)
        res = run_series(sc, n, seed=5, workers=WORKERS)
        g0 = res.summary["parameters"]["gamma0"]["trimmed_mean"]
        g1 = res.summary["parameters"]["gamma1"]["trimmed_mean"]
        good = abs(g0 - sc.truth["gamma0"]) <= 0.15 and abs(g1) <= 0.01
        ok &= good
        parts.append(f"series {s}: gamma0 {g0:.3f} (truth {sc.truth['gamma0']}), gamma1 {g1:+.4f}, "
                     f"{res.summary['n_failed']} failed")
    verdict(criteria, 5, ok, "; ".join(parts) + f"; {n} replicates each")


# ---------------------------------------------------------------------------
# 6. calibration of the gamma1 = 0 test
# ---------------------------------------------------------------------------


def test_criterion_6_gamma1_test(criteria):
    n = scaled(200, 10)
    parts, ok = [], True
    for s in (1, 5):
        res = gamma1_test_study(fish_scenario(s), n, seed=6, levels=(0.05,), workers=WORKERS)
        rate = res["rates"]["0.05"]
        ok &= rate <= 0.09
        parts.append(f"series {s}: {res['rejections']['0.05']}/{res['n_ok']} = {rate:.3f}")
    verdict(criteria, 6, ok, "; ".join(parts) + " (bound 0.09)")


# ---------------------------------------------------------------------------
# 7. three-step against two-step on the dispersal model
# ---------------------------------------------------------------------------


def test_criterion_7_rmsle_direction(criteria):
    n = scaled(100, 5)
    parts, ok = [], True
    for s in (1, 2):
        res = rmsle_compare(dispersal_scenario(s), n, seed=7, workers=WORKERS)
        p = res["parameters"]
        reps = [r for r in res["replicates"] if r.ok]
        same_beta = all(r.estimates["three:beta0"] == r.estimates["two:beta0"] and
                        r.estimates["three:beta1"] == r.estimates["two:beta1"] for r in reps)
        beta_ratios = (p["strength"]["ratio"], p["range"]["ratio"])
        good = p["sigma"]["ratio"] < 0.6 and beta_ratios == (1.0, 1.0) and same_beta
        ok &= good
        parts.append(f"series {s}: sigma ratio {p['sigma']['ratio']:.3f} "
                     f"(RMSLE {p['sigma']['rmsle_three_step']:.3f} / {p['sigma']['rmsle_two_step']:.3f}), "
                     f"strength/range ratios {beta_ratios[0]:.2f}/{beta_ratios[1]:.2f}, "
                     f"1/alpha ratio {p['inv_alpha']['ratio']:.3f}, delta ratio {p['delta']['ratio']:.3f}, "
                     f"{res['n_failed']} failed")
    verdict(criteria, 7, ok, "; ".join(parts) + f"; {n} paired replicates each")


# ---------------------------------------------------------------------------
# 8. null calibration of the envelope test
# ---------------------------------------------------------------------------


def test_criterion_8_envelope_null(criteria):
    sc = fish_scenario(7)
    depth = sc.covariates["depth"]
    outer = scaled(300, 10)
    rejected = []
    for i in range(outer):
        rng = replicate_rng(8, i)
        observed = sc.simulate(rng)
        part = partition_by_covariate(observed, depth, 5)
        stat = make_statistic(sc.intensity, part.grid, default_r_grid(sc.window, part), part, depth)
        _, res = envelope_test(observed, stat, sc.simulate, 199, seed=int(rng.integers(2**31)), level=0.05,
                               workers=WORKERS)
        rejected.append(res.rejected)
    rate = float(np.mean(rejected))
    verdict(criteria, 8, 0.02 <= rate <= 0.09,
            f"rejection rate {rate:.3f} ({int(np.sum(rejected))}/{outer}, 199 simulations each, band [0.02, 0.09])")


# ---------------------------------------------------------------------------
# 9. determinism of the command line
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(criteria, tmp_path):
    cfg = tmp_path / "fish.yaml"
    cfg.write_text(yaml.safe_dump({"scenario": "fish", "series": 7, "data": "sim/pattern.csv",
                                   "model": {"preset": "fish"}}))
    study = tmp_path / "study.yaml"
    study.write_text(yaml.safe_dump({"study": "gamma1", "scenario": "fish", "series": [1], "replicates": 3}))
    commands = {
        "simulate": ["simulate", str(cfg), "--seed", "9", "--out", str(tmp_path / "sim")],
        "fit": ["fit", str(cfg), "--out", str(tmp_path / "fit")],
        "gof": ["gof", str(tmp_path / "fit" / "fit.json"), "--nsim", "39", "--level", "0.1", "--seed", "9",
                "--out", str(tmp_path / "gof")],
        "study": ["study", str(study), "--seed", "9", "--out", str(tmp_path / "study")],
    }

    def run_all():
        out = {}
        for name, args in commands.items():
            subprocess.run([sys.executable, "-m", "nslgcp.cli", *args], check=True, capture_output=True)
            folder = Path(args[args.index("--out") + 1])
            out[name] = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}
        return out

    first, second = run_all(), run_all()
    same = [k for k in commands if first[k] == second[k]]
    files = sum(len(v) for v in first.values())
    verdict(criteria, 9, len(same) == len(commands),
            f"{len(same)}/{len(commands)} commands byte-identical on rerun ({files} artifacts hashed)")
