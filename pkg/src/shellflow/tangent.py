"""Variational flow U, Malliavin flow D, the low-mode-killing control (xi, g)
and Monte Carlo checks of the integration-by-parts duality.

    dU/dt = -nu A U + B(u, U) + B(U, u),          U(0) = v
    dD/dt = -nu A D + B(u, D) + B(D, u) + Q g,    D(0) = 0

All flows are stepped on the base path's grid with the same exponential
splitting as the integrator, so U is the exact derivative of the discrete
solution map.

Weight convention: with E|w_n(t)|^2 = t the duality reads
E[Df(u(T))[D(T)]] = E[f(u(T)) * 2 int_0^T (g, dW)]; the factor 2 is the
Girsanov weight for complex noise under the real inner product.  The
discrete weight accumulated here is the exact Cameron-Martin weight of the
Gaussian innovations, so the duality holds exactly for the scheme.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .functionals import Functional
from .integrator import BlowUpError, TrajectoryRecord, etd_coefficients, n_steps
from .noise import NoiseConfig, check_noise_condition, ou_coefficients
from .shell import ConfigError, ModelConfig, as_state, bilinear, h_norm


def _bsym(u, w, cfg):
    return bilinear(u, w, cfg) + bilinear(w, u, cfg)


def step_variational(U, u, dt: float, cfg: ModelConfig):
    """One step of the linearized flow along the base state u."""
    e, phi = etd_coefficients(cfg, dt)
    out = e * as_state(U, cfg.N) + phi * _bsym(u, U, cfg)
    if np.any(h_norm(out) > 1e8):
        raise BlowUpError(dt, detail="variational flow")
    return out


def step_malliavin(D, u, g_t, dt: float, cfg: ModelConfig, noise: NoiseConfig):
    """One step of the Malliavin flow driven by the control slice g_t."""
    e, phi = etd_coefficients(cfg, dt)
    q = noise.padded(cfg.N)
    g = np.zeros(cfg.N, dtype=complex)
    g_t = np.asarray(g_t, dtype=complex)
    g[: g_t.shape[-1]] = g_t
    out = e * as_state(D, cfg.N) + phi * (_bsym(u, D, cfg) + q * g)
    if np.any(h_norm(out) > 1e8):
        raise BlowUpError(dt, detail="Malliavin flow")
    return out


def cm_weights(cfg: ModelConfig, dt: float) -> np.ndarray:
    """Per-mode factor turning a drift perturbation into a shift of the innovations."""
    _, phi = etd_coefficients(cfg, dt)
    _, s = ou_coefficients(cfg, dt, np.ones(cfg.N))
    return phi / s


@dataclass
class FlowArrays:
    """Batched output of the compiled flow integrator."""

    times: np.ndarray
    u: np.ndarray
    U: np.ndarray
    D: np.ndarray
    xi: np.ndarray
    g: np.ndarray
    ito: np.ndarray  # discrete 2 int (g, dW)
    g2: np.ndarray  # int |g|^2 ds
    blowup_step: np.ndarray


G_MODES = {"none": _kernels.G_NONE, "const": _kernels.G_CONST, "control": _kernels.G_CONTROL}


def run_flows(
    x0,
    v0,
    T: float,
    dt: float,
    cfg: ModelConfig,
    noise: NoiseConfig,
    seed: int,
    streams=None,
    record_every: int | None = None,
    g_mode: str = "none",
    g_const=None,
    n_star: int = 0,
    tangent: bool = True,
) -> FlowArrays:
    x0 = np.atleast_2d(as_state(x0, cfg.N))
    v0 = np.atleast_2d(as_state(v0, cfg.N))
    if streams is None:
        streams = np.arange(max(x0.shape[0], v0.shape[0]), dtype=np.int64)
    streams = np.asarray(streams, dtype=np.int64)
    M = streams.size
    x0 = np.ascontiguousarray(np.broadcast_to(x0, (M, cfg.N)))
    v0 = np.ascontiguousarray(np.broadcast_to(v0, (M, cfg.N)))
    ns = n_steps(T, dt)
    if record_every is None:
        record_every = ns
    if ns % record_every:
        raise ValueError("record_every must divide the number of steps")
    q = noise.padded(cfg.N)
    if g_mode == "control":
        if n_star < 1 or n_star > cfg.N:
            raise ConfigError("n_star must lie in 1..N")
        if np.any(q[:n_star] == 0):
            raise ConfigError(f"control needs q_n != 0 for n <= n_star = {n_star}")
    gc = np.zeros(cfg.N, dtype=complex)
    if g_const is not None:
        g_const = np.asarray(g_const, dtype=complex)
        gc[: g_const.size] = g_const
        if np.any(gc[noise.n_active:] != 0):
            warnings.warn("control acts on modes without noise; Q g ignores them", stacklevel=2)
    n_act = noise.n_active if noise.max_q2 > 0 else 0
    e_c, phi_c = etd_coefficients(cfg, dt)
    _, sig_c = ou_coefficients(cfg, dt, q)
    cmw = cm_weights(cfg, dt)
    R = ns // record_every + 1
    shape = (M, R, cfg.N)
    rec = [np.zeros(shape, dtype=complex) for _ in range(5)]
    ito = np.zeros((M, R))
    g2 = np.zeros((M, R))
    blow = np.empty(M, dtype=np.int64)
    _kernels.run_tangent(
        x0, v0, ns, float(dt), cfg.lam, e_c, phi_c, sig_c, q, cmw, n_act,
        cfg.k, float(cfg.a), float(cfg.b), cfg.variant_code,
        np.uint64(seed), streams, int(record_every),
        bool(tangent), G_MODES[g_mode], gc, int(n_star),
        *rec, ito, g2, blow,
    )
    if np.any(blow >= 0):
        p = int(np.argmax(blow >= 0))
        raise BlowUpError(blow[p] * dt, p)
    return FlowArrays(np.arange(R) * record_every * dt, *rec, ito, g2, blow)


@dataclass
class ControlledFlows:
    u_traj: TrajectoryRecord
    U_traj: np.ndarray
    D_traj: np.ndarray
    xi_traj: np.ndarray
    g_traj: np.ndarray
    n_star: int
    ito: np.ndarray
    g2_integral: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.u_traj.times

    def radius(self) -> np.ndarray:
        """Low-mode radius r(t) of xi."""
        return h_norm(self.xi_traj[:, : self.n_star])

    def zeta2(self) -> np.ndarray:
        """|zeta(t)|^2, the high-mode part of xi."""
        return h_norm(self.xi_traj[:, self.n_star :]) ** 2

    def rows(self):
        xi = h_norm(self.xi_traj)
        r = self.radius()
        z2 = self.zeta2()
        g2 = h_norm(self.g_traj) ** 2
        for i, t in enumerate(self.times):
            yield float(t), float(xi[i]), float(r[i]), float(z2[i]), float(g2[i])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "xi_norm", "r", "zeta2", "g2"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])

    def to_json(self, path=None):
        doc = {
            "n_star": self.n_star,
            "meta": self.meta,
            "t_final": float(self.times[-1]),
            "rho_identity_error": verify_rho_identity(self),
            "g2_integral": float(self.g2_integral[-1]),
        }
        text = json.dumps(doc, sort_keys=True, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def build_control(
    u_traj: TrajectoryRecord,
    v,
    n_star: int,
    cfg: ModelConfig,
    noise: NoiseConfig,
    record_every: int = 1,
) -> ControlledFlows:
    """Control flow xi and signal g along the base path of `u_traj`.

    Low modes (n <= n_star) shrink radially, xi_i(t) = v_i r(t) / r(0) with
    r(t) = max(r(0) - t/2, 0); higher modes follow the linearized dynamics.
    g_i = (-nu k_i^2 xi_i + [B(u, xi) + B(xi, u)]_i + xi_i / (2 r)) / q_i for
    i <= n_star and 0 above, which makes U - D = xi.
    """
    v = as_state(v, cfg.N)
    if h_norm(v) > 1 + 1e-12:
        raise ValueError("|v| must be at most 1")
    if u_traj.refine != 1:
        raise ValueError("the base path must use unrefined noise")
    stride = int(round((u_traj.times[1] - u_traj.times[0]) / u_traj.dt))
    T = float(u_traj.times[-1])
    fl = run_flows(
        u_traj.states[0], v, T, u_traj.dt, cfg, noise, u_traj.seed,
        streams=[u_traj.stream], record_every=record_every,
        g_mode="control", n_star=n_star,
    )
    base = fl.u[0]
    if record_every == stride:
        # the compiled run must reproduce the supplied base path
        if not np.array_equal(base, u_traj.states):
            raise ValueError("trajectory does not match its own seed and configuration")
    vn = np.sqrt(np.sum(cfg.k**2 * np.abs(base) ** 2, axis=-1))
    # trapezoid on the record grid; coarser than the integrator's own sum
    diss = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(fl.times) * (vn[1:] ** 2 + vn[:-1] ** 2))])
    rec = TrajectoryRecord(
        times=fl.times, states=base, h_norms=h_norm(base), v_norms=vn,
        dissipation_integral=diss,
        k0=cfg.k0, dt=u_traj.dt, seed=u_traj.seed, stream=u_traj.stream,
    )
    return ControlledFlows(
        u_traj=rec, U_traj=fl.U[0], D_traj=fl.D[0], xi_traj=fl.xi[0],
        g_traj=fl.g[0], n_star=int(n_star), ito=fl.ito[0], g2_integral=fl.g2[0],
        meta={"dt": u_traj.dt, "seed": int(u_traj.seed), "stream": int(u_traj.stream)},
    )


def verify_rho_identity(flows: ControlledFlows) -> float:
    """max_t |U(t) - D(t) - xi(t)|."""
    return float(np.max(h_norm(flows.U_traj - flows.D_traj - flows.xi_traj)))


@dataclass
class IBPResult:
    lhs: float
    rhs: float
    stderr_lhs: float
    stderr_rhs: float
    stderr_diff: float
    samples: int

    @property
    def stderr(self) -> float:
        """Standard error of lhs - rhs (paired samples)."""
        return self.stderr_diff

    def agrees(self, k: float = 3.0) -> bool:
        return abs(self.lhs - self.rhs) <= k * self.stderr_diff


def _mean_se(a):
    a = np.asarray(a, dtype=float)
    return float(np.mean(a)), float(np.std(a, ddof=1) / np.sqrt(a.size))


def integration_by_parts_mc(
    phi: Functional,
    x,
    T: float,
    dt: float,
    cfg: ModelConfig,
    noise: NoiseConfig,
    samples: int,
    seed: int,
    g="control",
    v=None,
    n_star: int | None = None,
) -> IBPResult:
    """MC estimates of E[D phi(u(T))[D(T)]] and E[phi(u(T)) 2 int (g, dW)].

    g is either a constant complex vector (deterministic control) or
    "control", the xi-based construction started from direction v.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples for a meaningful standard error")
    x = as_state(x, cfg.N)
    if isinstance(g, str):
        if g != "control":
            raise ValueError("g must be 'control' or an array")
        if v is None:
            raise ValueError("the control construction needs a direction v")
        if n_star is None:
            raise ValueError("the control construction needs n_star")
        fl = run_flows(x, v, T, dt, cfg, noise, seed, np.arange(samples), g_mode="control",
                       n_star=n_star, tangent=False)
    else:
        fl = run_flows(x, np.zeros(cfg.N), T, dt, cfg, noise, seed, np.arange(samples),
                       g_mode="const", g_const=g, tangent=False)
    uT = fl.u[:, -1]
    lhs_s = phi.derivative(uT, fl.D[:, -1])
    rhs_s = phi.value(uT) * fl.ito[:, -1]
    lhs, se_l = _mean_se(lhs_s)
    rhs, se_r = _mean_se(rhs_s)
    _, se_d = _mean_se(lhs_s - rhs_s)
    return IBPResult(lhs, rhs, se_l, se_r, se_d, samples)


@dataclass
class GradientProbe:
    times: np.ndarray
    estimates: np.ndarray  # (n_x, n_v, n_t)
    stderrs: np.ndarray
    sup: np.ndarray  # sup over grids per time
    running_sup: np.ndarray
    plateau_ratio: float
    condition_ok: bool
    warning: str | None = None


def gradient_bound_probe(
    f: Functional,
    R: float,
    T_grid,
    v_grid,
    x_grid,
    n_star: int,
    samples: int,
    seed: int,
    cfg: ModelConfig,
    noise: NoiseConfig,
    dt: float,
    C: float | None = None,
    plateau_from: float = 4.0,
) -> GradientProbe:
    """Estimate D P_t f(x)[v] = E[f(u) 2 int (g, dW)] + E[Df(u)[xi(t)]] on grids."""
    T_grid = np.asarray(sorted(T_grid), dtype=float)
    x_grid = [as_state(x, cfg.N) for x in x_grid]
    v_grid = [as_state(v, cfg.N) for v in v_grid]
    if any(h_norm(x) > R + 1e-12 for x in x_grid):
        raise ValueError("x grid must lie in the ball |x| <= R")
    if any(h_norm(v) > 1 + 1e-12 for v in v_grid):
        raise ValueError("v grid must lie in the unit ball")
    warn = None
    ok = True
    if C is not None:
        n_min, ok = check_noise_condition(noise, cfg, C)
        if not ok or n_star < n_min:
            ok = False
            warn = f"noise-rank condition not met (need N_* >= {n_min} with nonzero q)"
            warnings.warn(warn, stacklevel=2)
    steps = [n_steps(t, dt) for t in T_grid]
    rec_every = int(np.gcd.reduce(steps))
    Tmax = float(T_grid[-1])
    est = np.zeros((len(x_grid), len(v_grid), T_grid.size + 1))
    se = np.zeros_like(est)
    pick = np.concatenate([[0], np.asarray(steps) // rec_every])
    for i, x in enumerate(x_grid):
        for j, v in enumerate(v_grid):
            fl = run_flows(x, v, Tmax, dt, cfg, noise, seed, np.arange(samples),
                           record_every=rec_every, g_mode="control", n_star=n_star, tangent=False)
            for c, r in enumerate(pick):
                u = fl.u[:, r]
                s = f.value(u) * fl.ito[:, r] + f.derivative(u, fl.xi[:, r])
                est[i, j, c], se[i, j, c] = _mean_se(s)
    times = np.concatenate([[0.0], T_grid])
    sup = np.max(np.abs(est), axis=(0, 1))
    running = np.maximum.accumulate(sup)
    ref = int(np.searchsorted(times, plateau_from))
    ref = min(ref, times.size - 1)
    ratio = float(running[-1] / running[ref]) if running[ref] > 0 else float("inf")
    return GradientProbe(times, est, se, sup, running, ratio, ok, warn)


@dataclass
class TangentCheck:
    etas: tuple
    errors: np.ndarray
    ratio: float
    tangent_norm: float


def tangent_fd_check(x, v, T: float, dt: float, cfg: ModelConfig, noise: NoiseConfig, seed: int,
                     stream: int = 0, etas=(1e-3, 5e-4), method: str = "difference") -> TangentCheck:
    """|(u^{x + eta v}(T) - u^x(T)) / eta - U(T)| on common noise for each eta.

    method="direct" subtracts two independent runs; at T = 1 the strong
    damping pushes that difference to round-off.  method="difference" steps
    w = u^{x + eta v} - u^x along the recorded base path with the same scheme,
        w <- e w + phi (B(u, w) + B(w, u) + B(w, w)),
    which is the same discrete map without the cancellation.
    """
    from .integrator import integrate_ensemble, integrate_path

    x = as_state(x, cfg.N)
    v = as_state(v, cfg.N)
    fl = run_flows(x, v, T, dt, cfg, noise, seed, [stream], g_mode="none")
    UT = fl.U[0, -1]
    if method == "direct":
        starts = np.stack([x] + [x + eta * v for eta in etas])
        run = integrate_ensemble(starts, T, dt, cfg, noise, seed, np.full(len(starts), stream),
                                 record_every=n_steps(T, dt), m_proj=1)
        base = run.final[0]
        diffs = [run.final[i + 1] - base for i in range(len(etas))]
    elif method == "difference":
        u = integrate_path(x, T, dt, cfg, noise, seed, stream).states
        e, ph = etd_coefficients(cfg, dt)
        w = np.stack([eta * v for eta in etas])
        for s in range(u.shape[0] - 1):
            ub = np.broadcast_to(u[s], w.shape)
            w = e * w + ph * (_bsym(ub, w, cfg) + bilinear(w, w, cfg))
        diffs = list(w)
    else:
        raise ValueError("method must be 'difference' or 'direct'")
    errs = np.array([h_norm(d / eta - UT) for d, eta in zip(diffs, etas)])
    return TangentCheck(tuple(etas), errs, float(errs[0] / errs[1]), float(h_norm(UT)))
