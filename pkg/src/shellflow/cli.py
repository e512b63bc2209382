"""Command line runner: ``shellflow run`` and ``shellflow validate``.

Exit codes: 0 all verdicts pass, 2 some verdict inconclusive, 1 a verdict
failed or the run errored (blow-up writes diagnostics.json), 64 invalid
configuration.
"""

import argparse
import json
import os
import sys

EXIT_OK, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_CONFIG = 0, 1, 2, 64


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shellflow", description="Stochastic shell-model experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write its artifacts")
    run.add_argument("--config", help="TOML experiment file")
    run.add_argument("--experiment", help="experiment name (overrides experiment.name)")
    run.add_argument("--seed", type=int)
    run.add_argument("--dt", type=float)
    run.add_argument("--T", type=float, dest="T")
    run.add_argument("--samples", type=int, help="Monte Carlo sample count M")
    run.add_argument("--out", help="output directory (SHELLFLOW_OUT wins)")
    run.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="set a dotted config path, repeatable")
    run.add_argument("--chain", help="chain file for finite-markov")
    val = sub.add_parser("validate", help="check a config without simulating")
    val.add_argument("--config", required=False)
    val.add_argument("config_pos", nargs="?", help=argparse.SUPPRESS)
    val.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def _overrides(args) -> dict:
    from .config import InvalidConfig, parse_value

    out = {}
    for item in args.override:
        if "=" not in item:
            raise InvalidConfig(f"--override {item!r}: expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    flag_paths = {
        "experiment": "experiment.name", "seed": "numerics.seed", "dt": "numerics.dt",
        "T": "numerics.T", "samples": "numerics.M", "out": "output.dir", "chain": "params.chain",
    }
    for attr, path in flag_paths.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[path] = val
    if os.environ.get("SHELLFLOW_OUT") and hasattr(args, "out"):
        out["output.dir"] = os.environ["SHELLFLOW_OUT"]
    return out


def _load(args, config_path):
    from .config import build_config, load_raw

    raw = load_raw(config_path) if config_path else {}
    return build_config(raw, _overrides(args))


def _setup_threads(k):
    if k is not None:
        if k < 1:
            raise ValueError("--threads must be positive")
        os.environ["NUMBA_NUM_THREADS"] = str(k)
    import numba

    if k is not None:
        numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def validate_config(cfg) -> list:
    """Warnings for a validated config; never simulates."""
    from .noise import check_noise_condition
    from .shell import operator_norm_constant

    model = cfg.model_config_obj()
    noise = cfg.noise_config_obj()
    warns = []
    if noise.max_q2 <= 0:
        warns.append("noise is identically zero: the noise-rank condition cannot hold")
    else:
        C = operator_norm_constant(model, trials=8)
        n_star, ok = check_noise_condition(noise, model, C)
        if not ok:
            warns.append(f"noise-rank condition fails: needs nonzero q_1..q_{n_star} (C = {C:.4g})")
    dt = cfg.dt()
    if dt > model.default_dt() * 10:
        warns.append(f"dt = {dt:g} is well above the suggested {model.default_dt():.3g}; "
                     "the explicit nonlinearity may be inaccurate")
    return warns


def cmd_validate(args) -> int:
    from .config import InvalidConfig

    path = args.config or args.config_pos
    if not path:
        print("validate: a config file is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args, path)
        warns = validate_config(cfg)
    except InvalidConfig as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for w in warns:
        print(f"warning: {w}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _stride(ns: int, target: int = 1000) -> int:
    """Smallest divisor d of ns with ns / d <= target."""
    for d in range(1, ns + 1):
        if ns % d == 0 and ns // d <= target:
            return d
    return ns


def _state(params, key, N, default=None):
    from .config import parse_state

    return parse_state(params.get(key, default), N)


def _noise_n_star(model, noise):
    from .noise import check_noise_condition
    from .shell import operator_norm_constant

    C = operator_norm_constant(model)
    n_star, ok = check_noise_condition(noise, model, C)
    return n_star, ok, C


def exp_simulate(ctx):
    import numpy as np

    from .integrator import integrate_path, n_steps
    from .lab import PASS, ProbeReport

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    T, dt = cfg.numerics.T, ctx["dt"]
    x = _state(p, "x", model.N, {"e": 1})
    every = int(p.get("record_every", _stride(n_steps(T, dt))))
    rec = integrate_path(x, T, dt, model, noise, cfg.numerics.seed, int(p.get("stream", 0)), every).check()
    ctx["csv"]["trajectory"] = rec.to_csv
    return [ProbeReport(
        "simulate", {"x": x, "T": T, "dt": dt, "record_every": every},
        estimates={"final_h_norm": float(rec.h_norms[-1]), "max_h_norm": float(rec.h_norms.max()),
                   "dissipation_integral": float(rec.dissipation_integral[-1])},
        stderrs={}, bounds={}, verdict=PASS, rule="trajectory finite and record invariants hold",
        arrays={"t_final": float(rec.times[-1]), "rows": int(rec.times.size),
                "final_state": np.asarray(rec.states[-1])},
    )]


def exp_energy(ctx):
    from .lab import energy_balance_mc

    cfg, p = ctx["cfg"], ctx["params"]
    x = _state(p, "x", ctx["model"].N)
    return [energy_balance_mc(x, cfg.numerics.T, ctx["dt"], ctx["model"], ctx["noise"], cfg.numerics.M,
                              cfg.numerics.seed, float(p.get("dt_factor", 10.0)))]


def exp_moment(ctx):
    from .lab import exp_moment_mc

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    eta = float(p.get("eta", model.nu / (2 * noise.max_q2)))
    xs = p.get("x_list", [None, {"e": 1}])
    out = []
    for i, spec in enumerate(xs):
        x = _state({"x": spec}, "x", model.N)
        out.append(exp_moment_mc(x, cfg.numerics.T, eta, model, noise, cfg.numerics.M,
                                 cfg.numerics.seed + i, ctx["dt"]))
    return out


def exp_tangent(ctx):
    import numpy as np

    from .lab import FAIL, PASS, ProbeReport
    from .tangent import tangent_fd_check

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    count = int(p.get("count", 10))
    etas = tuple(p.get("etas", (1e-3, 5e-4)))
    lo, hi = p.get("ratio_range", (1.5, 2.5))
    rng = np.random.default_rng(cfg.numerics.seed)
    ratios, errs, xs, vs = [], [], [], []
    for i in range(count):
        x = (rng.standard_normal(model.N) + 1j * rng.standard_normal(model.N)) / np.arange(1, model.N + 1)
        v = rng.standard_normal(model.N) + 1j * rng.standard_normal(model.N)
        v /= np.linalg.norm(v)
        r = tangent_fd_check(x, v, cfg.numerics.T, ctx["dt"], model, noise, cfg.numerics.seed, i, etas,
                             method=p.get("method", "difference"))
        ratios.append(r.ratio)
        errs.append(r.errors)
        xs.append(x)
        vs.append(v)
    ratios = np.array(ratios)
    ok = bool(np.all((ratios >= lo) & (ratios <= hi)))
    return [ProbeReport(
        "tangent", {"count": count, "etas": etas, "T": cfg.numerics.T, "dt": ctx["dt"],
                    "method": p.get("method", "difference")},
        estimates={"ratios": ratios, "errors": np.array(errs)}, stderrs={},
        bounds={"ratio_range": [lo, hi]}, verdict=PASS if ok else FAIL,
        rule="finite-difference error ratio between the two eta values lies in the range for every pair",
        arrays={"x": np.array(xs), "v": np.array(vs)},
    )]


def exp_ibp(ctx):
    import numpy as np

    from .functionals import get_functional
    from .lab import FAIL, PASS, ProbeReport
    from .tangent import integration_by_parts_mc

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    phi = get_functional(p.get("functional", "tanh_re1"))
    x = _state(p, "x", model.N, {"e": 1, "scale": 0.5})
    g = p.get("g", "control")
    kw = {}
    if g == "control":
        v = _state(p, "v", model.N, {"e": 1})
        n_star = int(p.get("n_star", _noise_n_star(model, noise)[0]))
        kw = {"v": v, "n_star": n_star}
    else:
        g = _state({"g": g}, "g", model.N)
    k = float(p.get("k_sigma", 3.0))
    r = integration_by_parts_mc(phi, x, cfg.numerics.T, ctx["dt"], model, noise, cfg.numerics.M,
                                cfg.numerics.seed, g=g, **kw)
    return [ProbeReport(
        "malliavin-ibp", {"functional": phi.name, "x": x, "g": g if isinstance(g, str) else np.asarray(g),
                          "T": cfg.numerics.T, "dt": ctx["dt"], "M": r.samples, **{k_: v_ for k_, v_ in kw.items()}},
        estimates={"lhs": r.lhs, "rhs": r.rhs, "difference": r.lhs - r.rhs},
        stderrs={"lhs": r.stderr_lhs, "rhs": r.stderr_rhs, "difference": r.stderr_diff},
        bounds={"k_sigma": k}, verdict=PASS if r.agrees(k) else FAIL,
        rule="|lhs - rhs| <= k_sigma * stderr of the paired difference",
    )]


def exp_control(ctx):
    import numpy as np

    from .integrator import integrate_path
    from .lab import FAIL, PASS, ProbeReport
    from .tangent import build_control, verify_rho_identity

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    T, dt, seed = cfg.numerics.T, ctx["dt"], cfg.numerics.seed
    x = _state(p, "x", model.N, {"e": 1})
    v = _state(p, "v", model.N, {"e": 1})
    n_min, ok_cond, C = _noise_n_star(model, noise)
    n_star = int(p.get("n_star", n_min))
    rho_max = float(p.get("rho_max", 1e-3))
    low_max = float(p.get("low_mode_max", 1e-6))
    errs, flows = [], None
    for h in (dt, dt / 2):
        rec = integrate_path(x, T, h, model, noise, seed)
        fl = build_control(rec, v, n_star, model, noise)
        errs.append(verify_rho_identity(fl))
        if flows is None:
            flows = fl
    ratio = errs[0] / errs[1] if errs[1] > 0 else float("inf")
    after = flows.times >= 2.0 - 1e-12
    low = float(np.max(np.abs(flows.xi_traj[after, :n_star]))) if np.any(after) else float("nan")
    ok = errs[0] <= rho_max and 1.5 <= ratio <= 2.5 and (not np.any(after) or low <= low_max)
    ctx["csv"]["control"] = flows.to_csv
    notes = [] if ok_cond else ["warning: noise-rank condition not satisfied"]
    return [ProbeReport(
        "control", {"x": x, "v": v, "n_star": n_star, "C": C, "T": T, "dt": dt},
        estimates={"rho_error": errs[0], "rho_error_half_dt": errs[1], "halving_ratio": ratio,
                   "low_mode_max_after_2": low, "g2_integral": float(flows.g2_integral[-1])},
        stderrs={}, bounds={"rho_max": rho_max, "low_mode_max": low_max, "ratio_range": [1.5, 2.5]},
        verdict=PASS if ok else FAIL,
        rule="rho identity error <= rho_max and halves with dt; low modes of xi vanish from t = 2",
        notes=notes,
    )]


def exp_eprop(ctx):
    from .functionals import get_dictionary
    from .lab import e_property_probe

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    m = int(p.get("m", 4))
    psi = get_dictionary(p.get("dictionary", "tanh"), m)
    x = _state(p, "x", model.N)
    return [e_property_probe(psi, x, p.get("deltas", [0.4, 0.2, 0.1]),
                             p.get("T_grid", [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0]),
                             model, noise, cfg.numerics.M, cfg.numerics.seed, ctx["dt"],
                             n_dirs=int(p.get("n_dirs", 2)), m=m, ratio_max=float(p.get("ratio_max", 0.75)))]


def exp_avg_bounded(ctx):
    from .lab import average_boundedness_probe, sphere_grid

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    r = float(p.get("r", 1.0))
    grid = sphere_grid(r, model.N, int(p.get("grid_size", 3)), cfg.numerics.seed)
    return [average_boundedness_probe(r, float(p.get("R", 2.0)), cfg.numerics.T, grid, model, noise,
                                      cfg.numerics.M, cfg.numerics.seed, ctx["dt"])]


def exp_concentrate(ctx):
    from .lab import concentration_probe, sphere_grid

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    r = float(p.get("r", 2.0))
    grid = sphere_grid(r, model.N, int(p.get("grid_size", 3)), cfg.numerics.seed)
    return [concentration_probe(float(p.get("eps", 0.5)), r, grid, model, noise, cfg.numerics.seed,
                                cfg.numerics.M, ctx["dt"])]


def exp_occupation(ctx):
    from .lab import occupation_lower_bound, sphere_grid

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    grid = sphere_grid(float(p.get("r", 1.0)), model.N, int(p.get("grid_size", 3)), cfg.numerics.seed)
    return [occupation_lower_bound(float(p.get("eps", 0.5)), grid, cfg.numerics.T, model, noise,
                                   cfg.numerics.M, cfg.numerics.seed, ctx["dt"])]


def exp_stability(ctx):
    from .lab import stability_experiment

    cfg, model, noise, p = ctx["cfg"], ctx["model"], ctx["noise"], ctx["params"]
    T = cfg.numerics.T
    x1 = _state(p, "x1", model.N)
    x2 = _state(p, "x2", model.N, {"e": 1, "scale": 5.0})
    T_grid = p.get("T_grid", [T / 10, T / 5, T / 2, T])
    seed = cfg.numerics.seed
    ok = None
    if noise.max_q2 > 0:
        ok = _noise_n_star(model, noise)[1]
    burn = (cfg.numerics.burn_in or 0.0) / T
    return [stability_experiment(x1, x2, T_grid, model, noise, (seed, seed + 1), cfg.numerics.M, ctx["dt"],
                                 m=int(p.get("m", 4)), cesaro_paths=int(p.get("cesaro_paths", 4)),
                                 burn_in_frac=burn, terminal_grid=tuple(p.get("terminal_grid", (1, 2, 5, 10))),
                                 condition_ok=ok)]


def exp_finite(ctx):
    import numpy as np

    from .config import InvalidConfig
    from .lab import FAIL, PASS, ProbeReport
    from .markov import FiniteSemigroup, build_decomposition, verify_stability_bruteforce

    p = ctx["params"]
    path = p.get("chain")
    if not path:
        raise InvalidConfig("params.chain: finite-markov needs a chain file (--chain)")
    try:
        sg = FiniteSemigroup.from_text(path)
    except (OSError, ValueError) as err:
        raise InvalidConfig(f"params.chain: {err}") from None
    n = sg.n
    i1, i2 = int(p.get("start1", 0)), int(p.get("start2", n - 1))
    mu1 = np.eye(n)[i1]
    mu2 = np.eye(n)[i2]
    x0 = sg.points[:, 0]
    phi = np.asarray(p.get("phi", (x0 - x0.min()) / max(np.ptp(x0), 1e-300) - 0.5), dtype=float)
    eps = float(p.get("eps", 0.25))
    z = int(p.get("z", 0))
    dec = build_decomposition(sg, mu1, mu2, z, p.get("delta"), eps, phi)
    T_max = dec.total_time + int(p.get("extra_steps", 10 * n))
    check = verify_stability_bruteforce(sg, mu1, mu2, [phi], T_max, eps, dec.total_time)
    ok = dec.residual <= 1e-12 and check.passed
    return [ProbeReport(
        "finite-markov", {"chain": os.path.basename(path), "n": n, "start1": i1, "start2": i2,
                          "z": z, "eps": eps, "phi": phi},
        estimates={"decomposition_residual": dec.residual, **check.estimates},
        stderrs={}, bounds={"decomposition_residual_max": 1e-12, "eps": eps},
        verdict=PASS if ok else FAIL,
        rule="decomposition identity residual <= 1e-12 and exact differences <= eps after the split time",
        arrays={"decomposition": dec.to_dict(), "difference": check.arrays["difference"]},
        notes=dec.notes,
    )]


EXPERIMENT_FUNCS = {
    "simulate": exp_simulate, "energy": exp_energy, "exp-moment": exp_moment, "tangent": exp_tangent,
    "malliavin-ibp": exp_ibp, "control": exp_control, "e-property": exp_eprop,
    "avg-bounded": exp_avg_bounded, "concentrate": exp_concentrate, "occupation": exp_occupation,
    "stability": exp_stability, "finite-markov": exp_finite,
}


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _write_csv(path, writer, header: str):
    # render to a temp file so the comment line can lead
    tmp = path + ".tmp"
    writer(tmp)
    with open(tmp, encoding="utf-8") as fh:
        body = fh.read()
    os.remove(tmp)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# " + header + "\n" + body)


def run_experiment(cfg) -> tuple:
    """Run the configured experiment; returns (reports, csv writers)."""
    from .shell import ConfigError

    ctx = {
        "cfg": cfg, "model": cfg.model_config_obj(), "noise": cfg.noise_config_obj(),
        "params": dict(cfg.params), "dt": cfg.dt(), "csv": {},
    }
    try:
        reports = EXPERIMENT_FUNCS[cfg.experiment.name](ctx)
    except ConfigError as err:
        from .config import InvalidConfig

        raise InvalidConfig(str(err)) from None
    return reports, ctx["csv"]


def cmd_run(args) -> int:
    # the thread count must be fixed before numba is first imported
    try:
        _setup_threads(args.threads)
    except ValueError as err:
        print(f"invalid config: threads: {err}", file=sys.stderr)
        return EXIT_CONFIG
    from .config import InvalidConfig

    try:
        cfg = _load(args, args.config)
    except InvalidConfig as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG

    from . import __version__
    from .integrator import BlowUpError
    from .lab import FAIL, INCONCLUSIVE
    from .markov import HypothesisError

    resolved = cfg.resolved()
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    name = cfg.experiment.name
    try:
        reports, csvs = run_experiment(cfg)
    except InvalidConfig as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (BlowUpError, HypothesisError, FloatingPointError, ValueError, RuntimeError) as err:
        diag = {"config": resolved, "version": __version__, "experiment": name,
                "error": type(err).__name__, "message": str(err)}
        if isinstance(err, BlowUpError):
            diag.update({"blowup_time": err.time, "blowup_path": err.path})
        _write_json(os.path.join(out, "diagnostics.json"), diag)
        print(f"{name}: ERROR ({type(err).__name__}: {err})")
        return EXIT_FAIL

    header = json.dumps({"config": resolved, "version": __version__}, sort_keys=True)
    formats = set(cfg.output.formats)
    verdicts = []
    for i, rep in enumerate(reports):
        doc = rep.to_dict()
        doc["config"] = resolved
        stem = name if len(reports) == 1 else f"{name}-{i}"
        if "json" in formats:
            _write_json(os.path.join(out, f"{stem}.json"), doc)
        print(rep.summary())
        verdicts.append(rep.verdict)
    if "csv" in formats:
        for key, writer in csvs.items():
            _write_csv(os.path.join(out, f"{name}-{key}.csv"), writer, header)
    if FAIL in verdicts:
        return EXIT_FAIL
    if INCONCLUSIVE in verdicts:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
