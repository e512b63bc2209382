"""Degenerate diagonal noise, Wiener increments and the exact OU step.

Convention: each w_n is a complex Brownian motion with E|w_n(t)|^2 = t, so
the real and imaginary parts each have variance t/2.  With this choice the
energy balance injects sum_n q_n^2 per unit time.

Gaussians come from a counter-based generator (Philox4x32-10) keyed on
(seed, stream, step, mode), so any sample can be regenerated on its own and
results do not depend on how paths are scheduled across threads.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .shell import ConfigError, ModelConfig, as_state


@dataclass(frozen=True)
class NoiseConfig:
    q_diag: tuple

    def __post_init__(self):
        q = np.asarray(self.q_diag, dtype=float)
        if q.ndim != 1:
            raise ConfigError("q_diag must be a flat sequence")
        if not np.all(np.isfinite(q)):
            raise ConfigError("q_diag must be finite")
        object.__setattr__(self, "q_diag", tuple(float(x) for x in q))

    @classmethod
    def low_modes(cls, q: float, n_modes: int, N: int) -> "NoiseConfig":
        """q on modes 1..n_modes, zero above."""
        if n_modes > N:
            raise ConfigError("noise support exceeds truncation")
        return cls(tuple([q] * n_modes + [0.0] * (N - n_modes)))

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.q_diag, dtype=float)

    @property
    def n0(self) -> int:
        """Smallest 1-based index with q_n = 0 for every n >= n0."""
        nz = np.flatnonzero(self.q)
        return int(nz[-1]) + 2 if nz.size else 1

    @property
    def n_active(self) -> int:
        return self.n0 - 1

    @property
    def trace_q2(self) -> float:
        return float(np.sum(self.q**2))

    @property
    def max_q2(self) -> float:
        return float(np.max(self.q**2)) if self.q.size else 0.0

    def padded(self, N: int) -> np.ndarray:
        """q as a length-N array, checking nothing is cut off."""
        q = self.q
        if q.size > N:
            if np.any(q[N:] != 0):
                raise ConfigError("noise acts on modes beyond the truncation")
            return q[:N].copy()
        return np.concatenate([q, np.zeros(N - q.size)])


@dataclass(frozen=True)
class WienerPath:
    seed: int
    dt: float
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")


def standard_gaussians(seed: int, streams, step0: int, nsteps: int, n_modes: int) -> np.ndarray:
    """Standard complex Gaussians (E|g|^2 = 1), shape (len(streams), nsteps, n_modes)."""
    streams = np.atleast_1d(np.asarray(streams, dtype=np.int64))
    re = np.empty((streams.size, nsteps, n_modes))
    im = np.empty_like(re)
    _kernels.gauss_block(np.uint64(seed), streams, int(step0), int(nsteps), int(n_modes), re, im)
    return re + 1j * im


def sample_increments(path: WienerPath, step: int, n_modes: int) -> np.ndarray:
    """Complex increments w(t_{step+1}) - w(t_step) for modes 1..n_modes."""
    if step < 0:
        raise ValueError("step index must be non-negative")
    g = standard_gaussians(path.seed, [path.stream], step, 1, n_modes)[0, 0]
    return np.sqrt(path.dt) * g


def ou_coefficients(cfg: ModelConfig, dt: float, q) -> tuple:
    """(decay, noise scale) of the exact OU step per mode."""
    lam = cfg.lam
    decay = np.exp(-lam * dt)
    scale = np.asarray(q) * np.sqrt(-np.expm1(-2.0 * lam * dt) / (2.0 * lam))
    return decay, scale


def ou_exact_step(z, dt: float, noise: NoiseConfig, cfg: ModelConfig, gauss) -> np.ndarray:
    """Exact one-step law of dz + nu A z dt = Q dW given standard complex Gaussians."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = as_state(z, cfg.N)
    decay, scale = ou_coefficients(cfg, dt, noise.padded(cfg.N))
    g = np.zeros(z.shape, dtype=complex)
    gauss = np.asarray(gauss, dtype=complex)
    g[..., : gauss.shape[-1]] = gauss
    return decay * z + scale * g


def noise_threshold(noise: NoiseConfig, cfg: ModelConfig, C: float) -> float:
    """log2(2 C^2 max q^2 / nu^3 + Tr Q^2 / (2 max q^2)) / 2."""
    m = noise.max_q2
    return float(np.log2(2.0 * C**2 * m / cfg.nu**3 + noise.trace_q2 / (2.0 * m)) / 2.0)


def check_noise_condition(noise: NoiseConfig, cfg: ModelConfig, C: float) -> tuple:
    """Smallest N_* above the noise-rank threshold and whether q_1..q_{N_*} are all nonzero."""
    if noise.max_q2 <= 0:
        raise ConfigError("degenerate: no active modes")
    if not C > 0:
        raise ValueError("C must be positive")
    t = noise_threshold(noise, cfg, C)
    n_star = max(1, int(np.floor(t)) + 1)
    q = noise.padded(cfg.N)
    ok = n_star <= cfg.N and bool(np.all(q[:n_star] != 0))
    return n_star, ok
