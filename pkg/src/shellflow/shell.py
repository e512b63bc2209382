"""Shell-space algebra: wavenumbers, norms, the operator A and the GOY/Sabra
bilinear terms.

States are complex numpy arrays whose last axis holds modes u_1..u_N.  Any
leading axes are treated as a batch.  Ghost shells outside 1..N are zero.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

VARIANTS = ("GOY", "Sabra")


class ConfigError(ValueError):
    """Invalid model, noise or experiment configuration."""


class DimensionError(ValueError):
    """States with mismatched truncations."""


class NonFiniteError(FloatingPointError):
    """A state acquired NaN or Inf amplitudes."""


@dataclass(frozen=True)
class ModelConfig:
    nu: float = 1.0
    k0: float = 2.0
    a: float = 1.0
    b: float = -0.5
    variant: str = "GOY"
    N: int = 16

    def __post_init__(self):
        if not np.isfinite(self.nu) or self.nu <= 0:
            raise ConfigError("nu must be positive")
        if not np.isfinite(self.k0) or self.k0 <= 1:
            raise ConfigError("k0 must exceed 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.N) != self.N or self.N < 4:
            raise ConfigError("N must be an integer >= 4")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ConfigError("a and b must be finite")

    @property
    def k(self) -> np.ndarray:
        return wavenumbers(self.N, self.k0)

    @property
    def lam(self) -> np.ndarray:
        """Per-mode linear decay rates nu * k_n^2."""
        return self.nu * self.k**2

    @property
    def variant_code(self) -> int:
        return VARIANTS.index(self.variant)

    def default_dt(self) -> float:
        """0.2 / (nu k_4^2) rounded down to 1, 2 or 5 times a power of ten, at most 1e-3."""
        raw = min(1e-3, 0.2 / (self.nu * wavenumber(4, self.k0) ** 2))
        p = 10.0 ** np.floor(np.log10(raw))
        return float(max(m * p for m in (1, 2, 5) if m * p <= raw * (1 + 1e-12)))


def wavenumber(n: int, k0: float) -> float:
    """k_n = k0 * 2^n."""
    if n < 1:
        raise ValueError("shell index starts at 1")
    return float(np.ldexp(float(k0), int(n)))


def wavenumbers(N: int, k0: float) -> np.ndarray:
    return np.ldexp(float(k0), np.arange(1, N + 1))


def as_state(u, N: int | None = None) -> np.ndarray:
    """Coerce to a complex state array and check the invariants."""
    arr = np.asarray(u, dtype=complex)
    if arr.ndim == 0:
        raise DimensionError("a state needs at least one axis")
    if N is not None and arr.shape[-1] != N:
        raise DimensionError(f"expected {N} modes, got {arr.shape[-1]}")
    if arr.shape[-1] < 4:
        raise DimensionError("truncation N must be at least 4")
    ensure_finite(arr)
    return arr


def ensure_finite(u, what: str = "state") -> np.ndarray:
    if not np.all(np.isfinite(u)):
        raise NonFiniteError(f"{what} has non-finite amplitudes")
    return u


def unit(n: int, N: int) -> np.ndarray:
    """The basis state e_n (1-based)."""
    e = np.zeros(N, dtype=complex)
    e[n - 1] = 1.0
    return e


def _same_n(u, v):
    if np.shape(u)[-1] != np.shape(v)[-1]:
        raise DimensionError(
            f"mismatched truncations {np.shape(u)[-1]} and {np.shape(v)[-1]}"
        )


def inner_h(u, v):
    """Real inner product (u, v) = Re sum u_n conj(v_n)."""
    _same_n(u, v)
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    return np.sum(u.real * v.real + u.imag * v.imag, axis=-1)


def h_norm(u):
    u = np.asarray(u, dtype=complex)
    return np.sqrt(np.sum(u.real**2 + u.imag**2, axis=-1))


def alpha_norm(u, alpha: float, k0: float):
    """||u||_alpha = (sum k_n^{4 alpha} |u_n|^2)^{1/2}."""
    u = np.asarray(u, dtype=complex)
    k = wavenumbers(u.shape[-1], k0)
    return np.sqrt(np.sum(k ** (4 * alpha) * np.abs(u) ** 2, axis=-1))


def v_norm(u, k0: float):
    return alpha_norm(u, 0.5, k0)


def calh_norm(u, k0: float):
    return alpha_norm(u, 0.25, k0)


@dataclass(frozen=True)
class NormReport:
    h_norm: float
    v_norm: float
    calH_norm: float
    k0: float
    state: np.ndarray = field(repr=False)

    def alpha_norm(self, alpha: float) -> float:
        return float(alpha_norm(self.state, alpha, self.k0))


def norms(u, k0: float) -> NormReport:
    u = as_state(u)
    return NormReport(
        h_norm=float(h_norm(u)),
        v_norm=float(v_norm(u, k0)),
        calH_norm=float(calh_norm(u, k0)),
        k0=float(k0),
        state=u.copy(),
    )


def apply_A(u, cfg: ModelConfig) -> np.ndarray:
    u = as_state(u, cfg.N)
    return ensure_finite(cfg.k**2 * u)


def bilinear(u, v, cfg: ModelConfig) -> np.ndarray:
    """[B(u, v)]_n for n = 1..N with zero ghost shells (batched over leading axes)."""
    _same_n(u, v)
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    N = u.shape[-1]
    if N != cfg.N:
        raise DimensionError(f"expected {cfg.N} modes, got {N}")
    shape = np.broadcast_shapes(u.shape, v.shape)
    u = np.broadcast_to(u, shape)
    v = np.broadcast_to(v, shape)
    pad = [(0, 0)] * (len(shape) - 1) + [(2, 2)]
    up = np.pad(u, pad)
    vp = np.pad(v, pad)
    # padded slot p holds shell p - 1; shell n sits at p = n + 1
    kp = np.zeros(N + 4)
    kp[1:] = cfg.k0 * 2.0 ** np.arange(0, N + 3)

    def U(s):
        return up[..., 2 + s : 2 + s + N]

    def V(s):
        return vp[..., 2 + s : 2 + s + N]

    def Kk(s):
        return kp[2 + s : 2 + s + N]

    a, b = cfg.a, cfg.b
    if cfg.variant == "GOY":
        out = (
            a * Kk(1) * np.conj(U(1)) * np.conj(V(2))
            + b * Kk(0) * np.conj(U(-1)) * np.conj(V(1))
            - a * Kk(-1) * np.conj(U(-1)) * np.conj(V(-2))
            - b * Kk(-1) * np.conj(U(-2)) * np.conj(V(-1))
        )
    else:
        out = (
            a * Kk(1) * np.conj(U(1)) * V(2)
            + b * Kk(0) * np.conj(U(-1)) * V(1)
            + a * Kk(-1) * U(-1) * V(-2)
            + b * Kk(-1) * U(-2) * V(-1)
        )
    return ensure_finite(1j * out, "bilinear term")


# ---------------------------------------------------------------------------
# operator-norm constants
# ---------------------------------------------------------------------------

NORM_EXPONENTS = {"H": 0.0, "calH": 0.5, "V": 1.0, "V'": -1.0}


def _real_basis(N):
    """2N complex basis vectors: e_1..e_N then i*e_1..i*e_N."""
    eye = np.eye(N, dtype=complex)
    return np.concatenate([eye, 1j * eye])


def bilinear_tensor(cfg: ModelConfig) -> np.ndarray:
    """T[i, :, j] = real coordinates of B(f_i, f_j) for the real basis f.

    B is real-bilinear, so B(u, v) in real coordinates is
    sum_ij u_i v_j T[i, :, j].
    """
    N = cfg.N
    f = _real_basis(N)
    out = bilinear(f[:, None, :], f[None, :, :], cfg)  # (2N, 2N, N)
    re = np.concatenate([out.real, out.imag], axis=-1)  # (i, j, 2N)
    return np.transpose(re, (0, 2, 1)).copy()


def _to_real(u):
    return np.concatenate([u.real, u.imag], axis=-1)


def operator_norm_constant(
    cfg: ModelConfig,
    trials: int = 32,
    seed: int = 0,
    norms: tuple = ("V", "H", "H"),
    return_argmax: bool = False,
):
    """Empirical lower bound on the best C in ||B(u, v)||_out <= C ||u||_1 ||v||_2.

    `norms` names the norms of (u, v, output) from NORM_EXPONENTS; the default
    is |B(u, v)| <= C ||u|| |v|.  For fixed u the sup over v is the largest
    singular value of the real-linear map v -> B(u, v) in weighted
    coordinates, so only u is searched: `trials` seeded random starts, each
    refined by L-BFGS on the normalized top singular value.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if cfg.a == 0 and cfg.b == 0:
        return (0.0, None) if return_argmax else 0.0
    pu, pv, po = (NORM_EXPONENTS[n] for n in norms)
    k2 = np.concatenate([cfg.k, cfg.k])
    wu, wv, wo = k2**pu, k2**pv, k2**po
    T = bilinear_tensor(cfg)
    # work in coordinates where all three norms are Euclidean
    Tw = T / wu[:, None, None] * wo[None, :, None] / wv[None, None, :]

    def top(x):
        M = np.tensordot(x, Tw, axes=(0, 0))
        U_, s, Vt = np.linalg.svd(M)
        return s[0], U_[:, 0], Vt[0]

    def obj(x):
        nx = np.linalg.norm(x)
        s, y, z = top(x / nx)
        g = np.tensordot(Tw, z, axes=(2, 0)) @ y  # d s / d x at x/nx
        grad = (g - s * x / nx) / nx
        return -s, -grad

    rng = np.random.default_rng(seed)
    best = 0.0
    best_x = None
    for _ in range(trials):
        x0 = rng.standard_normal(2 * cfg.N)
        res = minimize(obj, x0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
        for x in (x0, res.x):
            s = top(x / np.linalg.norm(x))[0]
            if s > best:
                best = float(s)
                best_x = x / np.linalg.norm(x)
    if return_argmax:
        xr = best_x / wu
        return best, xr[: cfg.N] + 1j * xr[cfg.N :]
    return best
