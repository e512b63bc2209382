"""Monte Carlo probes of the stability hypotheses for the shell SDE.

Every probe returns a ProbeReport holding its inputs, estimates, standard
errors, the bound it was compared with and a verdict that can be recomputed
from those numbers.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .functionals import Dictionary, bl_dictionary, project
from .integrator import BlowUpError, integrate_deterministic, integrate_ensemble, n_steps
from .noise import NoiseConfig
from .shell import ModelConfig, as_state, h_norm, unit

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"re": _jsonable(obj.real.tolist()), "im": _jsonable(obj.imag.tolist())}
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


@dataclass
class ProbeReport:
    name: str
    params: dict
    estimates: dict
    stderrs: dict
    bounds: dict
    verdict: str
    rule: str = ""
    arrays: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return _jsonable({
            "name": self.name,
            "version": __version__,
            "params": self.params,
            "estimates": self.estimates,
            "stderrs": self.stderrs,
            "bounds": self.bounds,
            "verdict": self.verdict,
            "rule": self.rule,
            "arrays": self.arrays,
            "notes": self.notes,
        })

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text

    def summary(self) -> str:
        return f"{self.name}: {self.verdict.upper()} ({self.rule})"


def _mean_se(a, axis=0):
    a = np.asarray(a, dtype=float)
    n = a.shape[axis]
    return a.mean(axis=axis), a.std(axis=axis, ddof=1) / np.sqrt(n)


def _model_params(cfg: ModelConfig, noise: NoiseConfig) -> dict:
    return {
        "model": {"nu": cfg.nu, "k0": cfg.k0, "a": cfg.a, "b": cfg.b, "variant": cfg.variant, "N": cfg.N},
        "noise": {"q_diag": list(noise.padded(cfg.N))},
    }


def _blowup_report(name, params, err: BlowUpError) -> ProbeReport:
    return ProbeReport(name, params, {}, {}, {}, FAIL, rule="no path may blow up",
                       notes=[str(err)], arrays={"blowup_time": err.time, "blowup_path": err.path})


def sphere_grid(r: float, N: int, count: int = 3, seed: int = 0) -> list:
    """Deterministic points with |x| = r: r e_1, r i e_2, then seeded random directions."""
    pts = [r * unit(1, N), 1j * r * unit(2, N)]
    rng = np.random.default_rng(seed)
    while len(pts) < count:
        z = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        z[4:] = 0  # stay in the forced low modes where the dynamics is richest
        pts.append(r * z / h_norm(z))
    return pts[:count]


# ---------------------------------------------------------------------------
# energy and moments
# ---------------------------------------------------------------------------


def energy_balance_mc(x, T, dt, cfg, noise, M, seed, dt_factor: float = 10.0) -> ProbeReport:
    """E|u(T)|^2 + 2 nu E int ||u||^2 against |x|^2 + Tr Q^2 T."""
    if M < 100:
        raise ValueError("need M >= 100")
    x = as_state(x, cfg.N)
    params = {"x": x, "T": T, "dt": dt, "M": M, "seed": seed, "dt_factor": dt_factor,
              **_model_params(cfg, noise)}
    try:
        run = integrate_ensemble(x, T, dt, cfg, noise, seed, np.arange(M), record_every=n_steps(T, dt), m_proj=1)
    except BlowUpError as err:
        return _blowup_report("energy", params, err)
    lhs = run.h2[:, -1] + 2 * cfg.nu * run.diss[:, -1]
    mean, se = _mean_se(lhs)
    target = float(h_norm(x) ** 2 + noise.trace_q2 * T)
    scale = noise.trace_q2 * T if noise.trace_q2 > 0 else max(target, 1.0)
    tol = 3 * se + dt_factor * dt * scale
    resid = mean - target
    ok = abs(resid) <= tol
    return ProbeReport(
        "energy", params,
        estimates={"lhs": mean, "residual": resid, "relative_residual": resid / scale},
        stderrs={"lhs": se},
        bounds={"target": target, "tolerance": tol},
        verdict=PASS if ok else FAIL,
        rule="|lhs - target| <= 3 stderr + dt_factor * dt * TrQ^2 T",
    )


def exp_moment_mc(x, t, eta, cfg, noise, M, seed, dt) -> ProbeReport:
    """E exp(eta |u(t)|^2 + eta nu int ||u||^2) against 2 exp(eta TrQ^2 t + eta |x|^2)."""
    eta_max = cfg.nu / (2 * noise.max_q2) if noise.max_q2 > 0 else np.inf
    if not 0 < eta <= eta_max * (1 + 1e-12):
        raise ValueError(f"eta must lie in (0, {eta_max}]")
    x = as_state(x, cfg.N)
    params = {"x": x, "t": t, "eta": eta, "dt": dt, "M": M, "seed": seed, **_model_params(cfg, noise)}
    try:
        run = integrate_ensemble(x, t, dt, cfg, noise, seed, np.arange(M), record_every=n_steps(t, dt), m_proj=1)
    except BlowUpError as err:
        return _blowup_report("exp-moment", params, err)
    # scale out the bound's exponent to keep the average well conditioned
    log_bound = float(np.log(2.0) + eta * noise.trace_q2 * t + eta * h_norm(x) ** 2)
    expo = eta * run.h2[:, -1] + eta * cfg.nu * run.diss[:, -1]
    w = np.exp(expo - log_bound)
    mean_w, se_w = _mean_se(w)
    rel = se_w / mean_w if mean_w > 0 else np.inf
    ok = mean_w <= 1.0 * (1 + 3 * rel)
    return ProbeReport(
        "exp-moment", params,
        estimates={"log_estimate": float(np.log(mean_w) + log_bound), "ratio_to_bound": mean_w},
        stderrs={"relative": rel},
        bounds={"log_bound": log_bound},
        verdict=PASS if ok else FAIL,
        rule="estimate <= bound * (1 + 3 relative stderr)",
    )


# ---------------------------------------------------------------------------
# occupation probes
# ---------------------------------------------------------------------------


def _time_average(vals, times):
    """Trapezoid time average along the last axis."""
    T = times[-1] - times[0]
    return np.sum(0.5 * np.diff(times) * (vals[..., 1:] + vals[..., :-1]), axis=-1) / T


def _sample_every(T, dt, target=200):
    """Record stride giving roughly `target` samples per unit time."""
    ns = n_steps(T, dt)
    stride = max(1, int(round(1.0 / (target * dt))))
    while ns % stride:
        stride -= 1
    return stride


def average_boundedness_probe(r, R, T, x_grid, cfg, noise, M, seed, dt) -> ProbeReport:
    """(1/T) int_0^T P(|u^x(s)| > R) ds for x on the sphere |x| = r."""
    bound = (noise.trace_q2 + r**2 / T) / (cfg.nu * R**2)
    stride = _sample_every(T, dt)
    x_grid = [as_state(x, cfg.N) for x in x_grid]
    params = {"r": r, "R": R, "T": T, "dt": dt, "M": M, "seed": seed, "x_grid": x_grid,
              "record_stride": stride, **_model_params(cfg, noise)}
    est, se = [], []
    for i, x in enumerate(x_grid):
        try:
            run = integrate_ensemble(x, T, dt, cfg, noise, seed, i * M + np.arange(M), record_every=stride, m_proj=1)
        except BlowUpError as err:
            return _blowup_report("avg-bounded", params, err)
        occ = _time_average((run.h2 > R * R).astype(float), run.times)
        m_, s_ = _mean_se(occ)
        est.append(m_)
        se.append(s_)
    est, se = np.array(est), np.array(se)
    ok = bool(np.all(est <= bound + 3 * se))
    return ProbeReport(
        "avg-bounded", params,
        estimates={"occupation_outside": est, "max": float(est.max())},
        stderrs={"occupation_outside": se},
        bounds={"bound": bound},
        verdict=PASS if ok else FAIL,
        rule="every estimate <= (TrQ^2 + r^2/T)/(nu R^2) + 3 stderr",
    )


def concentration_time(eps, r, cfg: ModelConfig, dt: float) -> float:
    """t0 = ln(2r/eps)/(nu k_1^2), rounded up to the step grid."""
    t0 = max(np.log(2 * r / eps), 0.0) / cfg.lam[0]
    return max(1, int(np.ceil(t0 / dt - 1e-9))) * dt


def concentration_probe(eps, r, x_grid, cfg, noise, seed, M, dt) -> ProbeReport:
    """Deterministic decay to eps/2 by t0, then alpha = min_x P(|u^x(t0)| < eps)."""
    t0 = concentration_time(eps, r, cfg, dt)
    x_grid = [as_state(x, cfg.N) for x in x_grid]
    params = {"eps": eps, "r": r, "t0": t0, "dt": dt, "M": M, "seed": seed, "x_grid": x_grid,
              **_model_params(cfg, noise)}
    det = [float(integrate_deterministic(x, t0, dt, cfg, record_every=n_steps(t0, dt)).h_norms[-1]) for x in x_grid]
    det_ok = max(det) <= eps / 2
    alphas = []
    for i, x in enumerate(x_grid):
        try:
            run = integrate_ensemble(x, t0, dt, cfg, noise, seed, i * M + np.arange(M),
                                     record_every=n_steps(t0, dt), m_proj=1)
        except BlowUpError as err:
            return _blowup_report("concentrate", params, err)
        alphas.append(float(np.mean(run.h2[:, -1] < eps * eps)))
    alphas = np.array(alphas)
    a = float(alphas.min())
    se = float(np.sqrt(a * (1 - a) / M))
    ok = det_ok and a - 3 * se > 0
    return ProbeReport(
        "concentrate", params,
        estimates={"alpha": a, "alpha_per_x": alphas, "deterministic_norm_at_t0": det},
        stderrs={"alpha": se},
        bounds={"deterministic_target": eps / 2},
        verdict=PASS if ok else FAIL,
        rule="deterministic |v(t0)| <= eps/2 for all x and alpha - 3 stderr > 0",
    )


def occupation_lower_bound(eps, x_grid, T, cfg, noise, M, seed, dt) -> ProbeReport:
    """Worst-case over x of (1/T) int_0^T P(|u^x(s)| < eps) ds."""
    stride = _sample_every(T, dt)
    x_grid = [as_state(x, cfg.N) for x in x_grid]
    params = {"eps": eps, "T": T, "dt": dt, "M": M, "seed": seed, "x_grid": x_grid,
              "record_stride": stride, **_model_params(cfg, noise)}
    est, se = [], []
    for i, x in enumerate(x_grid):
        try:
            run = integrate_ensemble(x, T, dt, cfg, noise, seed, i * M + np.arange(M), record_every=stride, m_proj=1)
        except BlowUpError as err:
            return _blowup_report("occupation", params, err)
        occ = _time_average((run.h2 < eps * eps).astype(float), run.times)
        m_, s_ = _mean_se(occ)
        est.append(m_)
        se.append(s_)
    est, se = np.array(est), np.array(se)
    w = int(np.argmin(est))
    ok = est[w] - 3 * se[w] > 0
    return ProbeReport(
        "occupation", params,
        estimates={"occupation": est, "worst": float(est[w])},
        stderrs={"occupation": se, "worst": float(se[w])},
        bounds={"lower": 0.0},
        verdict=PASS if ok else FAIL,
        rule="worst occupation - 3 stderr > 0",
    )


# ---------------------------------------------------------------------------
# e-property
# ---------------------------------------------------------------------------


def e_property_probe(psi: Dictionary, x, delta_grid, T_grid, cfg, noise, M, seed, dt,
                     n_dirs: int = 2, m: int = 4, ratio_max: float = 0.75) -> ProbeReport:
    """Coupled estimates of sup_t |P_t psi(x) - P_t psi(x')| for |x - x'| = delta.

    Paths from x and x' share their noise (same seed and streams), so the
    difference of means is the mean of paired differences.  The supremum is
    also taken over the dictionary members and over n_dirs seeded directions.
    """
    x = as_state(x, cfg.N)
    deltas = np.array(sorted(delta_grid, reverse=True), dtype=float)
    T_grid = np.array(sorted(set([0.0] + list(T_grid))), dtype=float)
    pos = T_grid[T_grid > 0]
    steps = [n_steps(t, dt) for t in pos]
    stride = int(np.gcd.reduce(steps))
    Tmax = float(pos[-1])
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(n_dirs):
        z = np.zeros(cfg.N, dtype=complex)
        z[:m] = rng.standard_normal(m) + 1j * rng.standard_normal(m)
        dirs.append(z / h_norm(z))
    params = {"x": x, "deltas": deltas, "T_grid": T_grid, "dt": dt, "M": M, "seed": seed,
              "n_dirs": n_dirs, "m": m, "dictionary": psi.version, "dictionary_size": psi.size,
              **_model_params(cfg, noise)}
    streams = np.arange(M)
    pick = np.searchsorted(np.arange(0, n_steps(Tmax, dt) + 1, stride) * dt, T_grid - 1e-12)

    def values(x0):
        run = integrate_ensemble(x0, Tmax, dt, cfg, noise, seed, streams, record_every=stride, m_proj=m)
        return psi.evaluate(project(run.proj[:, pick], m))  # (M, nT, K)

    try:
        base = values(x)
        sup_t = np.zeros((deltas.size, T_grid.size))
        se_t = np.zeros_like(sup_t)
        for i, d in enumerate(deltas):
            for z in dirs:
                diff = values(x + d * z) - base
                mean, se = _mean_se(diff)  # (nT, K)
                k = np.argmax(np.abs(mean), axis=-1)
                cur = np.abs(mean[np.arange(T_grid.size), k])
                upd = cur > sup_t[i]
                sup_t[i] = np.where(upd, cur, sup_t[i])
                se_t[i] = np.where(upd, se[np.arange(T_grid.size), k], se_t[i])
    except BlowUpError as err:
        return _blowup_report("e-property", params, err)
    sup = sup_t.max(axis=1)
    arg = sup_t.argmax(axis=1)
    sup_se = se_t[np.arange(deltas.size), arg]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = sup[1:] / sup[:-1]
    # propagate MC error of both sups into the ratio
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio_se = ratios * np.sqrt((sup_se[1:] / sup[1:]) ** 2 + (sup_se[:-1] / sup[:-1]) ** 2)
        c0 = float(np.max(sup / deltas))
    ok = bool(np.all(ratios <= ratio_max + 3 * ratio_se))
    # per-time halving ratios; NaN where the larger-delta value is at round-off level
    live = sup_t[:-1] > 1e-12
    by_time = np.full(sup_t[1:].shape, np.nan)
    by_time[live] = sup_t[1:][live] / sup_t[:-1][live]
    return ProbeReport(
        "e-property", params,
        estimates={"sup_over_t": sup, "sup_by_time": sup_t, "ratios": ratios, "ratios_by_time": by_time,
                   "argmax_time": T_grid[arg], "c0_fit": c0},
        stderrs={"sup_over_t": sup_se, "ratios": ratio_se},
        bounds={"ratio_max": ratio_max, "probed_horizon": Tmax},
        verdict=PASS if ok else FAIL,
        rule="sup(delta/2)/sup(delta) <= ratio_max + 3 stderr for each halving (sup over the probed horizon only)",
    )


# ---------------------------------------------------------------------------
# empirical measures
# ---------------------------------------------------------------------------


@dataclass
class EmpiricalMeasure:
    points: np.ndarray  # (K, 2m)
    horizon: float
    burn_in: float
    m: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("empirical measure has non-finite support points")

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.points.shape[0], 1.0 / self.points.shape[0])

    @classmethod
    def dirac(cls, point, m=None) -> "EmpiricalMeasure":
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(p[None], 0.0, 0.0, m if m is not None else p.size // 2)


def cesaro_measure(x, T, burn_in, thin, m, cfg, noise, seed, dt, paths: int = 1,
                   sample_dt: float = 0.01, stream0: int = 0, T_grid=None):
    """Time-sampled Cesaro measure of the m-mode projection.

    Samples every sample_dt (then every `thin`-th of those) after burn_in,
    pooled over `paths` independent paths.  With T_grid, returns one measure
    per horizon built from prefixes of the same paths.
    """
    if not burn_in < T:
        raise ValueError("burn_in must be smaller than T")
    stride = max(1, int(round(sample_dt / dt))) * int(thin)
    ns = n_steps(T, dt)
    if ns % stride:
        raise ValueError("sampling interval must divide the horizon")
    x = as_state(x, cfg.N)
    run = integrate_ensemble(x, T, dt, cfg, noise, seed, stream0 + np.arange(paths), record_every=stride, m_proj=m)
    pts = project(run.proj, m)  # (paths, R, 2m)

    def make(Th, b):
        sel = (run.times >= b - 1e-12) & (run.times <= Th + 1e-12)
        return EmpiricalMeasure(pts[:, sel].reshape(-1, 2 * m), Th, b, m,
                                {"seed": seed, "paths": paths, "thin": thin, "stride_steps": stride})

    if T_grid is None:
        return make(T, burn_in)
    return [make(Th, burn_in * Th / T) for Th in T_grid]


def dual_lipschitz_distance(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, dictionary: Dictionary) -> float:
    """max over the dictionary of |<f, mu1> - <f, mu2>|."""
    if mu1.points.shape[1] != mu2.points.shape[1]:
        raise ValueError("projection dimensions differ")
    a = mu1.weights @ dictionary.evaluate(mu1.points)
    b = mu2.weights @ dictionary.evaluate(mu2.points)
    return float(np.max(np.abs(a - b)))


def stability_experiment(x1, x2, T_grid, cfg, noise, seeds, M, dt, m: int = 4,
                         cesaro_paths: int = 4, burn_in_frac: float = 0.0,
                         terminal_grid=(1.0, 2.0, 5.0, 10.0), dictionary: Dictionary | None = None,
                         condition_ok: bool | None = None) -> ProbeReport:
    """Distances between laws started at x1 and x2 against a same-start baseline.

    Cesaro measures come from `cesaro_paths` long paths per start, evaluated
    at every T in T_grid.  Terminal-time empirical laws use M paths per start
    on `terminal_grid`.  The baseline compares x1 under two seeds; x2 runs on
    the second seed, so its comparison shares noise with the baseline.
    """
    dictionary = dictionary or bl_dictionary(m)
    s1, s2 = seeds
    T_grid = sorted(float(t) for t in T_grid)
    Tmax = T_grid[-1]
    x1 = as_state(x1, cfg.N)
    x2 = as_state(x2, cfg.N)
    params = {"x1": x1, "x2": x2, "T_grid": T_grid, "seeds": [s1, s2], "M": M, "dt": dt, "m": m,
              "cesaro_paths": cesaro_paths, "burn_in_frac": burn_in_frac,
              "terminal_grid": list(terminal_grid), "dictionary": dictionary.version,
              **_model_params(cfg, noise)}
    notes = []
    if condition_ok is False:
        notes.append("warning: noise-rank condition not satisfied")
    try:
        ces = {}
        for key, xx, s in (("a", x1, s1), ("b", x2, s2), ("base", x1, s2)):
            ces[key] = cesaro_measure(xx, Tmax, burn_in_frac * Tmax, 1, m, cfg, noise, s, dt,
                                      paths=cesaro_paths, T_grid=T_grid)
        d_ces = np.array([dual_lipschitz_distance(a, b, dictionary) for a, b in zip(ces["a"], ces["b"])])
        b_ces = np.array([dual_lipschitz_distance(a, b, dictionary) for a, b in zip(ces["a"], ces["base"])])
        tg = sorted(float(t) for t in terminal_grid)
        steps = [n_steps(t, dt) for t in tg]
        stride = int(np.gcd.reduce(steps))
        pick = [s // stride for s in steps]
        law = {}
        for key, xx, s in (("a", x1, s1), ("b", x2, s2), ("base", x1, s2)):
            run = integrate_ensemble(xx, tg[-1], dt, cfg, noise, s, np.arange(M), record_every=stride, m_proj=m)
            law[key] = [EmpiricalMeasure(project(run.proj[:, p], m), t, 0.0, m) for p, t in zip(pick, tg)]
        d_term = np.array([dual_lipschitz_distance(a, b, dictionary) for a, b in zip(law["a"], law["b"])])
        b_term = np.array([dual_lipschitz_distance(a, b, dictionary) for a, b in zip(law["a"], law["base"])])
    except BlowUpError as err:
        return _blowup_report("stability", params, err)
    # monotone up to the MC floor set by the baseline
    mono = bool(np.all(d_ces[1:] <= d_ces[:-1] + 2 * b_ces[1:]))
    final_ok = d_ces[-1] <= 2 * b_ces[-1] and d_term[-1] <= 2 * b_term[-1]
    return ProbeReport(
        "stability", params,
        estimates={"cesaro_distance": d_ces, "terminal_distance": d_term},
        stderrs={"cesaro_baseline": b_ces, "terminal_baseline": b_term},
        bounds={"final_cesaro_limit": 2 * b_ces[-1], "final_terminal_limit": 2 * b_term[-1]},
        verdict=PASS if (mono and final_ok) else FAIL,
        rule="Cesaro distances non-increasing within 2x baseline and final distances <= 2x baseline",
        arrays={"T_grid": T_grid, "terminal_grid": tg},
        notes=notes,
    )
