"""Time stepping for the truncated shell SDE.

Scheme (per mode, frozen over a step):

    u <- e^{-lam dt} u + phi B(u, u) + s q g,   lam = nu k^2,
    phi = (1 - e^{-lam dt}) / lam,  s = sqrt((1 - e^{-2 lam dt}) / (2 lam)),

with g standard complex Gaussians.  The linear part and the OU forcing are
exact, the nonlinearity is explicit.  With ``refine = R`` the OU innovation
of a step is assembled from R exact fine steps, which lets runs at dt and
dt / 2 share one Brownian path (a common-noise coupling).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .noise import NoiseConfig, WienerPath, ou_coefficients, standard_gaussians
from .shell import ModelConfig, as_state, bilinear, h_norm, inner_h, v_norm


class BlowUpError(FloatingPointError):
    def __init__(self, time: float, path: int = 0, detail: str = ""):
        self.time = float(time)
        self.path = int(path)
        super().__init__(
            f"integrator blow-up at t={self.time:.6g} (path {self.path}){': ' + detail if detail else ''}"
        )


def etd_coefficients(cfg: ModelConfig, dt: float) -> tuple:
    """(e^{-lam dt}, (1 - e^{-lam dt}) / lam) per mode."""
    lam = cfg.lam
    return np.exp(-lam * dt), -np.expm1(-lam * dt) / lam


def n_steps(T: float, dt: float) -> int:
    if not dt > 0 or not T > 0:
        raise ValueError("T and dt must be positive")
    if dt > T * (1 + 1e-12):
        raise ValueError("dt must not exceed T")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a whole number of steps of dt={dt}")
    return n


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    h_norms: np.ndarray
    v_norms: np.ndarray
    dissipation_integral: np.ndarray
    k0: float
    dt: float
    seed: int = 0
    stream: int = 0
    refine: int = 1
    meta: dict = field(default_factory=dict)

    def check(self):
        """Assert the record invariants; returns self."""
        assert np.all(np.diff(self.times) > 0), "times must increase"
        assert np.allclose(self.h_norms, h_norm(self.states), rtol=1e-12, atol=0)
        assert np.allclose(self.v_norms, v_norm(self.states, self.k0), rtol=1e-12, atol=0)
        assert np.all(np.diff(self.dissipation_integral) >= 0)
        return self

    def to_csv(self, path):
        N = self.states.shape[1]
        header = ["t"]
        for n in range(1, N + 1):
            header += [f"re_u{n}", f"im_u{n}"]
        header += ["h_norm", "v_norm", "dissipation_integral"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i, t in enumerate(self.times):
                row = [repr(float(t))]
                for z in self.states[i]:
                    row += [repr(float(z.real)), repr(float(z.imag))]
                row += [repr(float(self.h_norms[i])), repr(float(self.v_norms[i])),
                        repr(float(self.dissipation_integral[i]))]
                w.writerow(row)


@dataclass
class EnsembleRun:
    """Many independent paths: projections, energies and dissipation integrals."""

    times: np.ndarray
    proj: np.ndarray  # (M, R, m) first m modes at recorded times
    h2: np.ndarray  # (M, R) |u|^2
    diss: np.ndarray  # (M, R) int_0^t ||u||^2 ds
    final: np.ndarray  # (M, N)
    blowup_step: np.ndarray  # (M,) -1 if none
    dt: float

    @property
    def blown_up(self) -> np.ndarray:
        return self.blowup_step >= 0


def step_semi_implicit(u, dt: float, cfg: ModelConfig, noise: NoiseConfig, gauss=None, t: float = 0.0):
    """One scheme step; `gauss` holds standard complex Gaussians for the active modes."""
    u = as_state(u, cfg.N)
    e, phi = etd_coefficients(cfg, dt)
    _, scale = ou_coefficients(cfg, dt, noise.padded(cfg.N))
    out = e * u + phi * bilinear(u, u, cfg)
    if gauss is not None:
        g = np.zeros(u.shape, dtype=complex)
        gauss = np.asarray(gauss, dtype=complex)
        g[..., : gauss.shape[-1]] = gauss
        out = out + scale * g
    if not np.all(np.isfinite(out)) or np.any(h_norm(out) > 1e8):
        raise BlowUpError(t + dt)
    return out


def integrate_ensemble(
    x0,
    T: float,
    dt: float,
    cfg: ModelConfig,
    noise: NoiseConfig,
    seed: int,
    streams=None,
    record_every: int = 1,
    m_proj: int = 4,
    refine: int = 1,
    raise_on_blowup: bool = True,
) -> EnsembleRun:
    """Integrate paths from the rows of x0; path p uses RNG stream streams[p]."""
    x0 = np.atleast_2d(as_state(x0, cfg.N)).astype(complex)
    if streams is None:
        streams = np.arange(x0.shape[0], dtype=np.int64)
    streams = np.asarray(streams, dtype=np.int64)
    if streams.ndim != 1 or x0.shape[0] not in (1, streams.size):
        raise ValueError("need one stream per path")
    M = streams.size
    x0 = np.ascontiguousarray(np.broadcast_to(x0, (M, cfg.N)))
    ns = n_steps(T, dt)
    if ns % record_every:
        raise ValueError("record_every must divide the number of steps")
    if refine < 1:
        raise ValueError("refine must be >= 1")
    q = noise.padded(cfg.N)
    n_act = int(noise.n_active) if noise.max_q2 > 0 else 0
    e_c, phi_c = etd_coefficients(cfg, dt)
    e_f, sig_f = ou_coefficients(cfg, dt / refine, q)
    nrec = ns // record_every + 1
    m_proj = min(m_proj, cfg.N)
    proj = np.zeros((M, nrec, m_proj), dtype=complex)
    h2 = np.zeros((M, nrec))
    diss = np.zeros((M, nrec))
    final = np.zeros((M, cfg.N), dtype=complex)
    blow = np.empty(M, dtype=np.int64)
    _kernels.run_ensemble(
        x0, ns, float(dt), int(refine), e_c, phi_c, e_f, sig_f, n_act,
        cfg.k, float(cfg.a), float(cfg.b), cfg.variant_code,
        np.uint64(seed), streams, int(record_every), m_proj,
        proj, h2, diss, final, blow,
    )
    run = EnsembleRun(
        times=np.arange(nrec) * record_every * dt,
        proj=proj, h2=h2, diss=diss, final=final, blowup_step=blow, dt=dt,
    )
    if raise_on_blowup and np.any(blow >= 0):
        p = int(np.argmax(blow >= 0))
        raise BlowUpError(blow[p] * dt, p)
    return run


def integrate_path(
    x,
    T: float,
    dt: float,
    cfg: ModelConfig,
    noise: NoiseConfig,
    seed: int,
    stream: int = 0,
    record_every: int = 1,
    refine: int = 1,
) -> TrajectoryRecord:
    """Single path with full states recorded."""
    x = as_state(x, cfg.N)
    run = integrate_ensemble(
        x[None], T, dt, cfg, noise, seed, streams=[stream],
        record_every=record_every, m_proj=cfg.N, refine=refine,
    )
    states = run.proj[0]
    return TrajectoryRecord(
        times=run.times,
        states=states,
        h_norms=np.sqrt(run.h2[0]),
        v_norms=v_norm(states, cfg.k0),
        dissipation_integral=run.diss[0],
        k0=cfg.k0, dt=dt, seed=int(seed), stream=int(stream), refine=int(refine),
    )


def integrate_deterministic(x, T: float, dt: float, cfg: ModelConfig, record_every: int = 1) -> TrajectoryRecord:
    """The noiseless system dv/dt = -nu A v + B(v, v)."""
    off = NoiseConfig(tuple([0.0] * cfg.N))
    return integrate_path(x, T, dt, cfg, off, seed=0, record_every=record_every)


def brownian_path(path: WienerPath, n_coarse: int, refine: int, n_modes: int) -> np.ndarray:
    """W at coarse times 0, dt, ..., consistent with the integrator's noise.

    `path.dt` is the coarse step; the fine increments are sqrt(dt/refine) g.
    """
    g = standard_gaussians(path.seed, [path.stream], 0, n_coarse * refine, n_modes)[0]
    dw = np.sqrt(path.dt / refine) * g
    W = np.zeros((n_coarse + 1, n_modes), dtype=complex)
    W[1:] = np.cumsum(dw, axis=0)[refine - 1 :: refine]
    return W


def pathwise_split_check(x, T: float, dt: float, cfg: ModelConfig, noise: NoiseConfig, seed: int, stream: int = 0) -> float:
    """max_t |u(t) - (v(t) + z(t))| for the split u = v + z on shared noise.

    u comes from the compiled integrator; z (exact OU) and v (deterministic
    system driven by z) are stepped here in numpy.
    """
    x = as_state(x, cfg.N)
    rec = integrate_path(x, T, dt, cfg, noise, seed, stream)
    ns = rec.times.size - 1
    q = noise.padded(cfg.N)
    n_act = noise.n_active
    e, phi = etd_coefficients(cfg, dt)
    _, scale = ou_coefficients(cfg, dt, q)
    G = np.zeros((ns, cfg.N), dtype=complex)
    if n_act:
        G[:, :n_act] = standard_gaussians(seed, [stream], 0, ns, n_act)[0]
    z = np.zeros(cfg.N, dtype=complex)
    v = x.copy()
    worst = 0.0
    for s in range(ns):
        w = v + z
        v = e * v + phi * bilinear(w, w, cfg)
        z = e * z + scale * G[s]
        worst = max(worst, float(h_norm(rec.states[s + 1] - (v + z))))
    return worst


def weak_form_residual(rec: TrajectoryRecord, j: int, cfg: ModelConfig, noise: NoiseConfig, path: WienerPath | None = None) -> float:
    """max_t of the integral-form residual tested against e_j.

    (u(t), e_j) + nu int (u, A e_j) + int (B(u, e_j), u) - (x, e_j) - (Q W(t), e_j),
    with trapezoid quadrature on the record grid.
    """
    if not 1 <= j <= cfg.N:
        raise ValueError("mode index out of range")
    if path is None:
        path = WienerPath(rec.seed, rec.dt, rec.stream)
    stride = int(round((rec.times[1] - rec.times[0]) / rec.dt)) if rec.times.size > 1 else 1
    n_coarse = (rec.times.size - 1) * stride
    q = noise.padded(cfg.N)
    qW = np.zeros(rec.times.size)
    if noise.n_active >= j and q[j - 1] != 0:
        W = brownian_path(path, n_coarse, rec.refine, noise.n_active)[::stride]
        qW = q[j - 1] * W[:, j - 1].real
    phi = np.zeros(cfg.N, dtype=complex)
    phi[j - 1] = 1.0
    u = rec.states
    lin = cfg.nu * inner_h(u, cfg.k**2 * phi)
    nonlin = inner_h(bilinear(u, np.broadcast_to(phi, u.shape), cfg), u)
    f = lin + nonlin
    integral = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(rec.times) * (f[1:] + f[:-1]))])
    res = inner_h(u, phi) + integral - inner_h(u[0], phi) - qW
    return float(np.max(np.abs(res)))
