"""Test functionals: smooth functions of the state with derivatives, and the
fixed dictionary of bounded 1-Lipschitz functions on low-mode projections.
"""

from dataclasses import dataclass

import numpy as np

DICTIONARY_VERSION = "bl64-v1"


def project(u, m: int) -> np.ndarray:
    """First m modes as interleaved reals (Re u_1, Im u_1, ..., Im u_m)."""
    u = np.asarray(u, dtype=complex)[..., :m]
    out = np.empty(u.shape[:-1] + (2 * u.shape[-1],))
    out[..., 0::2] = u.real
    out[..., 1::2] = u.imag
    return out


# ---------------------------------------------------------------------------
# smooth functionals of the full state
# ---------------------------------------------------------------------------


class Functional:
    """Bounded C^1 function on states; value and derivative are batched."""

    name = "functional"
    sup_norm = 1.0  # bound on |f|
    lipschitz = 1.0  # bound on |Df|

    def value(self, u):
        raise NotImplementedError

    def derivative(self, u, h):
        """Df(u)[h], real."""
        raise NotImplementedError

    @property
    def c1_norm(self) -> float:
        return self.sup_norm + self.lipschitz


class Constant(Functional):
    name = "constant"
    lipschitz = 0.0

    def __init__(self, c: float = 1.0):
        self.c = float(c)
        self.sup_norm = abs(self.c)

    def value(self, u):
        u = np.asarray(u)
        return np.full(u.shape[:-1], self.c)

    def derivative(self, u, h):
        return np.zeros(np.asarray(u).shape[:-1])


class TanhRe1(Functional):
    """tanh(Re u_1)."""

    name = "tanh_re1"

    def value(self, u):
        return np.tanh(np.asarray(u)[..., 0].real)

    def derivative(self, u, h):
        c = np.cosh(np.asarray(u)[..., 0].real)
        return np.asarray(h)[..., 0].real / c**2


class GaussEnergy(Functional):
    """exp(-|u|^2)."""

    name = "gauss_energy"
    lipschitz = float(np.sqrt(2.0) * np.exp(-0.5))

    def value(self, u):
        u = np.asarray(u)
        return np.exp(-np.sum(np.abs(u) ** 2, axis=-1))

    def derivative(self, u, h):
        u = np.asarray(u)
        h = np.asarray(h)
        ip = np.sum(u.real * h.real + u.imag * h.imag, axis=-1)
        return -2.0 * np.exp(-np.sum(np.abs(u) ** 2, axis=-1)) * ip


LIBRARY = {"tanh_re1": TanhRe1, "gauss_energy": GaussEnergy, "constant": Constant}


def get_functional(name: str) -> Functional:
    try:
        return LIBRARY[name]()
    except KeyError:
        raise ValueError(f"unknown functional {name!r}; choose from {sorted(LIBRARY)}") from None


# ---------------------------------------------------------------------------
# bounded-Lipschitz dictionary on R^{2m}
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dictionary:
    """Functions x -> tanh(W x + c) (rows with |w| = 1) plus radial exp(-|x|^2).

    Rows of W: the 2m coordinate directions first, then seeded random unit
    directions.  Every member is bounded by 1 and 1-Lipschitz.
    """

    W: np.ndarray
    c: np.ndarray
    radial: bool
    version: str = DICTIONARY_VERSION

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @property
    def size(self) -> int:
        return self.W.shape[0] + int(self.radial)

    def evaluate(self, x) -> np.ndarray:
        """(..., dim) points -> (..., size) function values."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"points have dimension {x.shape[-1]}, dictionary expects {self.dim}")
        vals = np.tanh(x @ self.W.T + self.c)
        if self.radial:
            r = np.exp(-np.sum(x * x, axis=-1))[..., None]
            vals = np.concatenate([vals, r], axis=-1)
        return vals

    def gradient(self, x) -> np.ndarray:
        """(..., dim) -> (..., size, dim)."""
        x = np.asarray(x, dtype=float)
        s = 1.0 / np.cosh(x @ self.W.T + self.c) ** 2
        g = s[..., :, None] * self.W
        if self.radial:
            r = -2.0 * np.exp(-np.sum(x * x, axis=-1))[..., None] * x
            g = np.concatenate([g, r[..., None, :]], axis=-2)
        return g

    def subset(self, idx) -> "Dictionary":
        idx = np.asarray(idx)
        return Dictionary(self.W[idx], self.c[idx], radial=False, version=self.version)


def bl_dictionary(m: int = 4, size: int = 64, seed: int = 20240601) -> Dictionary:
    """The fixed dictionary: 2m coordinate tanh, one radial, the rest seeded half-spaces."""
    d = 2 * m
    n_rand = size - d - 1
    if n_rand < 0:
        raise ValueError("dictionary too small for the projection dimension")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_rand, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    W = np.concatenate([np.eye(d), dirs])
    c = np.concatenate([np.zeros(d), rng.uniform(-1.0, 1.0, n_rand)])
    return Dictionary(W, c, radial=True)


def tanh_dictionary(m: int = 4) -> Dictionary:
    """Coordinate tanh functions only."""
    d = 2 * m
    return Dictionary(np.eye(d), np.zeros(d), radial=False)


def get_dictionary(name: str, m: int = 4) -> Dictionary:
    if name == "bl64":
        return bl_dictionary(m)
    if name == "tanh":
        return tanh_dictionary(m)
    raise ValueError(f"unknown dictionary {name!r}")


class ProjectedFunctional(Functional):
    """One dictionary member composed with the m-mode projection."""

    def __init__(self, dictionary: Dictionary, index: int, m: int):
        if dictionary.dim != 2 * m:
            raise ValueError("dictionary dimension does not match projection")
        self.dictionary = dictionary
        self.index = int(index)
        self.m = m
        self.name = f"{dictionary.version}[{index}]"

    def value(self, u):
        return self.dictionary.evaluate(project(u, self.m))[..., self.index]

    def derivative(self, u, h):
        g = self.dictionary.gradient(project(u, self.m))[..., self.index, :]
        return np.sum(g * project(h, self.m), axis=-1)
