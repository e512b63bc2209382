"""Acceptance suite at desk scale: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary.  Desk: GOY, N=16, k0=2, nu=1, a=1, b=-0.5, q=0.3 on
modes 1..4, dt=1e-4.  Single-core runtime is roughly 25 minutes.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from shellflow.config import EXPERIMENTS
from shellflow.functionals import TanhRe1, tanh_dictionary
from shellflow.lab import (
    average_boundedness_probe,
    concentration_probe,
    e_property_probe,
    energy_balance_mc,
    exp_moment_mc,
    sphere_grid,
    stability_experiment,
)
from shellflow.markov import (
    FiniteSemigroup,
    HypothesisError,
    build_decomposition,
    check_avg_bounded,
    check_concentrating,
    check_e_property,
    random_chain,
    verify_stability_bruteforce,
)
from shellflow.noise import NoiseConfig, check_noise_condition
from shellflow.integrator import integrate_path
from shellflow.shell import ModelConfig, bilinear, h_norm, inner_h, operator_norm_constant, unit
from shellflow.tangent import build_control, integration_by_parts_mc, tangent_fd_check, verify_rho_identity

ROOT = Path(__file__).resolve().parents[1]
DESK = ModelConfig()
NOISE = NoiseConfig.low_modes(0.3, 4, 16)
OFF = NoiseConfig((0.0,) * 16)
DT = 1e-4
SEED = 20240601


class Clock:
    def __init__(self, budget):
        self.budget = budget
        self.t0 = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0

    def ok(self):
        return self.elapsed < self.budget

    def __str__(self):
        return f"{self.elapsed:.1f}s of {self.budget:.0f}s"


def desk_n_star():
    C = operator_norm_constant(DESK)
    n_star, ok = check_noise_condition(NOISE, DESK, C)
    return n_star, ok, C


def test_algebra(verdict):
    clock = Clock(5)
    rng = np.random.default_rng(SEED)
    worst_orth = worst_anti = 0.0
    for variant in ("GOY", "Sabra"):
        for N in (4, 8, 16):
            cfg = ModelConfig(variant=variant, N=N)
            u, v, w = (rng.standard_normal((1000, N)) + 1j * rng.standard_normal((1000, N)) for _ in range(3))
            kmax = cfg.k[-1]
            orth = np.abs(inner_h(bilinear(v, u, cfg), u)) / (kmax * h_norm(u) ** 2 * h_norm(v))
            anti = np.abs(inner_h(bilinear(u, v, cfg), w) + inner_h(bilinear(u, w, cfg), v))
            anti /= kmax * h_norm(u) * h_norm(v) * h_norm(w)
            worst_orth = max(worst_orth, orth.max())
            worst_anti = max(worst_anti, anti.max())
    ok = worst_orth <= 1e-12 and worst_anti <= 1e-12 and clock.ok()
    assert verdict("ALGEBRA", ok, f"orthogonality {worst_orth:.2e}, antisymmetry {worst_anti:.2e}, {clock}")


def test_energy(verdict):
    clock = Clock(300)
    rep = energy_balance_mc(np.zeros(16), 5.0, DT, DESK, NOISE, 2000, SEED)
    e = rep.estimates
    ok = rep.passed and clock.ok()
    assert verdict("ENERGY-1", ok, f"lhs {e['lhs']:.5f} vs TrQ^2 T {rep.bounds['target']:.5f}, "
                                   f"residual {e['residual']:.2e} <= tol {rep.bounds['tolerance']:.2e}, {clock}")


def test_exp_moment(verdict):
    clock = Clock(600)
    eta = DESK.nu / (2 * NOISE.max_q2)
    reps = [exp_moment_mc(x, 5.0, eta, DESK, NOISE, 10_000, SEED + i, DT)
            for i, x in enumerate((np.zeros(16), unit(1, 16)))]
    ratios = [r.estimates["ratio_to_bound"] for r in reps]
    ok = all(r.passed for r in reps) and clock.ok()
    assert verdict("EXPMOM", ok, "estimate/bound " + ", ".join(f"{q:.3f}" for q in ratios)
                   + f" for x = 0, e_1 (eta = {eta:.3f}), {clock}")


def test_tangent(verdict):
    clock = Clock(120)
    rng = np.random.default_rng(SEED)
    ratios = []
    for i in range(10):
        x = (rng.standard_normal(16) + 1j * rng.standard_normal(16)) / np.arange(1, 17)
        v = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        v /= h_norm(v)
        ratios.append(tangent_fd_check(x, v, 1.0, DT, DESK, NOISE, SEED, stream=i).ratio)
    ratios = np.array(ratios)
    ok = bool(np.all((ratios >= 1.5) & (ratios <= 2.5))) and clock.ok()
    assert verdict("TANGENT", ok, f"error ratios in [{ratios.min():.4f}, {ratios.max():.4f}], {clock}")


def test_control(verdict):
    clock = Clock(300)
    n_star, cond, C = desk_n_star()
    v = (unit(1, 16) + 1j * unit(2, 16) + unit(6, 16)) / np.sqrt(3)
    errs, low = [], None
    for dt in (DT, DT / 2):
        rec = integrate_path(unit(1, 16), 2.5, dt, DESK, NOISE, SEED, record_every=100)
        fl = build_control(rec, v, n_star, DESK, NOISE, record_every=100)
        errs.append(verify_rho_identity(fl))
        if low is None:
            low = float(np.max(np.abs(fl.xi_traj[fl.times >= 2.0 - 1e-12, :n_star])))
    ratio = errs[0] / errs[1]
    ok = cond and low <= 1e-6 and errs[0] <= 1e-3 and 1.5 <= ratio <= 2.5 and clock.ok()
    assert verdict("CONTROL", ok, f"n_star {n_star} (C = {C:.3f}), low modes at t >= 2 {low:.1e}, "
                                  f"rho error {errs[0]:.2e} -> {errs[1]:.2e} (ratio {ratio:.2f}), {clock}")


def _linear_oracle(x1, g1, q, lam, T):
    m = np.exp(-lam * T) * x1
    s = np.sqrt(q**2 * -np.expm1(-2 * lam * T) / (4 * lam))
    z, w = np.polynomial.hermite_e.hermegauss(120)
    return np.sum(w / np.cosh(m + s * z) ** 2) / np.sqrt(2 * np.pi) * q * g1 * -np.expm1(-lam * T) / lam


def test_ibp(verdict):
    clock = Clock(900)
    phi = TanhRe1()
    g = np.zeros(4)
    g[0] = 1.0
    lin = ModelConfig(a=0.0, b=0.0)
    r_lin = integration_by_parts_mc(phi, 0.5 * unit(1, 16), 0.5, DT, lin, NOISE, 10_000, SEED, g=g)
    exact = _linear_oracle(0.5, 1.0, 0.3, lin.lam[0], 0.5)
    n_star = desk_n_star()[0]
    r_ctl = integration_by_parts_mc(phi, 0.5 * unit(1, 16), 1.0, DT, DESK, NOISE, 10_000, SEED + 1,
                                    g="control", v=unit(1, 16), n_star=n_star)
    r_const = integration_by_parts_mc(phi, 0.5 * unit(1, 16), 1.0, DT, DESK, NOISE, 10_000, SEED + 2, g=g)
    lin_ok = r_lin.agrees(3) and abs(r_lin.rhs - exact) <= 3 * r_lin.stderr_rhs
    ok = lin_ok and r_ctl.agrees(3) and r_const.agrees(3) and clock.ok()

    def z(r):
        return abs(r.lhs - r.rhs) / r.stderr_diff

    assert verdict("IBP", ok, f"linear: lhs {r_lin.lhs:.5f} rhs {r_lin.rhs:.5f} exact {exact:.5f} ({z(r_lin):.2f} sigma); "
                              f"desk control {z(r_ctl):.2f} sigma; desk constant g {z(r_const):.2f} sigma "
                              f"(lhs {r_const.lhs:.4f}); {clock}")


def test_cheby(verdict):
    clock = Clock(600)
    grid = sphere_grid(1.0, 16, 3, SEED)
    rep = average_boundedness_probe(1.0, 2.0, 10.0, grid, DESK, NOISE, 2000, SEED, DT)
    ok = rep.passed and clock.ok()
    assert verdict("CHEBY", ok, f"max occupation outside {rep.estimates['max']:.2e} vs bound "
                                f"{rep.bounds['bound']:.4f}, {clock}")


def test_concentration(verdict):
    clock = Clock(600)
    grid = sphere_grid(2.0, 16, 3, SEED)
    rep = concentration_probe(0.5, 2.0, grid, DESK, NOISE, SEED, 2000, DT)
    det = concentration_probe(0.5, 2.0, grid, DESK, OFF, SEED, 2000, DT)
    a, se = rep.estimates["alpha"], rep.stderrs["alpha"]
    ok = rep.passed and a - 3 * se > 0 and det.estimates["alpha"] == 1.0 and clock.ok()
    assert verdict("CONC", ok, f"alpha {a:.4f} (stderr {se:.1e}), noiseless alpha {det.estimates['alpha']}, {clock}")


def test_e_property(verdict):
    clock = Clock(1200)
    T_grid = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0]
    rep = e_property_probe(tanh_dictionary(4), np.zeros(16), [0.4, 0.2, 0.1], T_grid, DESK, NOISE, 200, SEED, DT)
    ratios = np.asarray(rep.estimates["ratios"])
    by_time = np.asarray(rep.estimates["ratios_by_time"], dtype=float)
    live = by_time[np.isfinite(by_time)]
    ok = rep.passed and bool(np.all(live <= 0.75)) and clock.ok()
    assert verdict("EPROP", ok, f"sup ratios {np.round(ratios, 4).tolist()}, per-time ratios in "
                                f"[{live.min():.3f}, {live.max():.3f}] over {live.size} live points, {clock}")


def test_stability(verdict):
    clock = Clock(1800)
    n_star, cond, _ = desk_n_star()
    rep = stability_experiment(np.zeros(16), 5.0 * unit(1, 16), [50.0, 100.0, 200.0, 500.0], DESK, NOISE,
                               (SEED, SEED + 1), 500, DT, condition_ok=cond)
    d, b = rep.estimates, rep.stderrs
    ok = rep.passed and clock.ok()
    assert verdict("STABLE", ok, f"final Cesaro distance {d['cesaro_distance'][-1]:.4f} vs baseline "
                                 f"{b['cesaro_baseline'][-1]:.4f}; terminal {d['terminal_distance'][-1]:.4f} vs "
                                 f"{b['terminal_baseline'][-1]:.4f}; {clock}")


def test_finite(verdict):
    clock = Clock(60)
    rng = np.random.default_rng(SEED)
    eps = 0.25
    passed = tried = worst = 0
    worst = 0.0
    failures = []
    while passed < 100:
        tried += 1
        n = int(rng.integers(5, 21))
        sg = random_chain(rng, n)
        phi = sg.points[:, 0] - 0.5
        mu1, mu2 = np.eye(n)[0], np.eye(n)[n - 1]
        # hypotheses: e-property, average boundedness, concentration at z = 0
        if not check_e_property(sg, phi).converged():
            continue
        check_avg_bounded(sg, np.arange(n), eps)
        try:
            dec = build_decomposition(sg, mu1, mu2, 0, None, eps, phi)
        except HypothesisError:
            continue
        rep = verify_stability_bruteforce(sg, mu1, mu2, [phi], dec.total_time + 5 * n, eps, dec.total_time)
        worst = max(worst, dec.residual)
        if dec.residual > 1e-12 or not rep.passed:
            failures.append(tried)
        passed += 1
    # a reducible chain violates concentration: the verifier must report the failure
    P = np.array([[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5], [0, 0, 0.5, 0.5]])
    red = FiniteSemigroup([[0.0], [1.0], [5.0], [6.0]], P)
    red_phi = np.array([-0.5, -0.5, 0.5, 0.5])
    bad = verify_stability_bruteforce(red, np.eye(4)[0], np.eye(4)[3], [red_phi], 200, eps)
    alpha_red = check_concentrating(red, 0, 1.5)
    try:
        build_decomposition(red, np.eye(4)[0], np.eye(4)[3], 0, 1.5, eps, red_phi)
        raised = False
    except HypothesisError:
        raised = True
    viol_ok = bad.verdict == "fail" and alpha_red == 0.0 and raised
    ok = not failures and viol_ok and clock.ok()
    assert verdict("FINITE", ok, f"100 chains ({tried} drawn), worst decomposition residual {worst:.1e}, "
                                 f"{len(failures)} failures; reducible chain flagged: {viol_ok}; {clock}")


SMALL = {
    "simulate": ["--T", "0.1"],
    "energy": ["--T", "0.2", "--samples", "100"],
    "exp-moment": ["--T", "0.2", "--samples", "100"],
    "tangent": ["--T", "0.05", "--override", "params.count=2"],
    "malliavin-ibp": ["--T", "0.1", "--samples", "100"],
    "control": ["--T", "0.1"],
    "e-property": ["--samples", "20", "--override", "params.T_grid=[0.05, 0.1]"],
    "avg-bounded": ["--T", "0.2", "--samples", "50"],
    "concentrate": ["--samples", "50"],
    "occupation": ["--T", "0.2", "--samples", "50"],
    "stability": ["--T", "1", "--samples", "20", "--override", "params.T_grid=[0.5, 1.0]",
                  "--override", "params.terminal_grid=[0.5, 1.0]", "--override", "params.cesaro_paths=1"],
    "finite-markov": ["--chain", str(ROOT / "configs" / "two-state.txt")],
}


def _artifacts(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


def test_determinism(verdict, tmp_path):
    clock = Clock(900)
    assert set(SMALL) == set(EXPERIMENTS)
    env = dict(os.environ)
    env.pop("SHELLFLOW_OUT", None)
    mismatched, codes = [], {}
    for name in EXPERIMENTS:
        blobs = []
        for threads in ("1", "2", "1"):
            out = tmp_path / f"{name}-{len(blobs)}"
            cmd = [sys.executable, "-m", "shellflow.cli", "run", "--config", str(ROOT / "configs" / "desk.toml"),
                   "--experiment", name, "--seed", "11", "--threads", threads, "--out", str(tmp_path / "o"),
                   *SMALL[name]]
            proc = subprocess.run(cmd, capture_output=True, text=True, env=env)
            codes[name] = proc.returncode
            blobs.append(_artifacts(tmp_path / "o"))
            for p in (tmp_path / "o").iterdir():
                p.unlink()
        if not (blobs[0] == blobs[1] == blobs[2]) or not blobs[0]:
            mismatched.append(name)
    ok = not mismatched and clock.ok()
    assert verdict("DETERMINISM", ok, f"{len(EXPERIMENTS)} experiments rerun with 1, 2, 1 threads; "
                                      f"mismatches {mismatched or 'none'}; exit codes {sorted(set(codes.values()))}; "
                                      f"{clock}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
