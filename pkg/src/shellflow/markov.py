"""Exact checks of the stability criterion on finite Markov chains.

Time is discrete: P_t = P^t.  Measures are row vectors pushed forward by
mu -> mu P, functions are column vectors pulled back by f -> P f.  Balls
are closed: B(z, r) = {x : |x - z| <= r}.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.spatial.distance import cdist

from .lab import FAIL, PASS, ProbeReport


class HypothesisError(RuntimeError):
    """A hypothesis of the criterion fails for the given chain."""


@dataclass
class FiniteSemigroup:
    points: np.ndarray  # (n, d)
    P: np.ndarray  # (n, n) row-stochastic

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.P = np.asarray(self.P, dtype=float)
        n = self.points.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"kernel must be {n}x{n}, got {self.P.shape}")
        if np.any(self.P < 0):
            raise ValueError("kernel has negative entries")
        if np.max(np.abs(self.P.sum(axis=1) - 1)) > 1e-12:
            raise ValueError("kernel rows must sum to 1 within 1e-12")
        d = cdist(self.points, self.points)
        np.fill_diagonal(d, np.inf)
        if n > 1 and d.min() == 0:
            raise ValueError("embedded points must be distinct")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dist(self) -> np.ndarray:
        return cdist(self.points, self.points)

    def ball(self, z: int, r: float) -> np.ndarray:
        return self.dist[z] <= r + 1e-12

    def push(self, mu, t: int = 1) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if t > 8:
            # repeated squaring keeps round-off at O(log t) products
            return mu @ np.linalg.matrix_power(self.P, t)
        for _ in range(t):
            mu = mu @ self.P
        return mu

    def pull(self, f, t: int = 1) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if t > 8:
            return np.linalg.matrix_power(self.P, t) @ f
        for _ in range(t):
            f = self.P @ f
        return f

    def cesaro_limit(self) -> np.ndarray:
        """Pi = lim (1/T) sum_{s<T} P^s, built from the null spaces of P - I."""
        A = self.P - np.eye(self.n)
        R = null_space(A)
        L = null_space(A.T)
        return R @ np.linalg.solve(L.T @ R, L.T)

    @classmethod
    def from_text(cls, path) -> "FiniteSemigroup":
        """File: 'n d', then n coordinate rows, then n kernel rows; '#' starts a comment."""
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tokens += line.split("#", 1)[0].split()
        try:
            n, d = int(tokens[0]), int(tokens[1])
            vals = np.array([float(t) for t in tokens[2:]])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed chain file {path}: {exc}") from None
        if vals.size != n * d + n * n:
            raise ValueError(f"chain file {path}: expected {n * d + n * n} numbers, got {vals.size}")
        return cls(vals[: n * d].reshape(n, d), vals[n * d :].reshape(n, n))

    def to_text(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.n} {self.points.shape[1]}\n")
            for row in self.points:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            for row in self.P:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def random_chain(rng, n: int, d: int = 2, density: float = 0.6) -> FiniteSemigroup:
    """Random chain with uniform points in [0,1]^d and a sparse-ish kernel with self-loops."""
    pts = rng.uniform(size=(n, d))
    K = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    K[np.arange(n), np.arange(n)] += rng.uniform(0.05, 0.5, n)
    return FiniteSemigroup(pts, K / K.sum(axis=1, keepdims=True))


def lipschitz_constant(sg: FiniteSemigroup, f) -> float:
    f = np.asarray(f, dtype=float)
    d = sg.dist
    iu = np.triu_indices(sg.n, 1)
    return float(np.max(np.abs(f[:, None] - f[None, :])[iu] / d[iu])) if sg.n > 1 else 0.0


# ---------------------------------------------------------------------------
# hypothesis checks
# ---------------------------------------------------------------------------


@dataclass
class EPropertyTable:
    modulus: np.ndarray  # (n, n) bound on sup_t |P^t psi(x) - P^t psi(z)|
    exact_part: np.ndarray  # max over t <= H
    tail_part: np.ndarray
    tail_error: np.ndarray  # per-point L1 distance of delta_x P^H to its limit
    horizon: int
    distances: np.ndarray

    def modulus_at(self, r: float) -> float:
        """max over pairs with distance <= r."""
        mask = self.distances <= r + 1e-12
        return float(self.modulus[mask].max())

    def converged(self, tol: float = 1e-9) -> bool:
        return bool(np.max(self.tail_error) <= tol)


def check_e_property(sg: FiniteSemigroup, psi, horizon: int | None = None) -> EPropertyTable:
    """Exact sup over t <= H plus a tail bound valid for every t > H.

    |P^t psi(x) - Pi psi(x)| <= ||psi||_inf ||delta_x P^t - delta_x Pi||_1, and the
    L1 distance to the invariant limit never increases, so the tail term
    |Pi psi(x) - Pi psi(z)| + ||psi||_inf (e_x(H) + e_z(H)) covers all t > H.
    """
    psi = np.asarray(psi, dtype=float)
    H = horizon if horizon is not None else 50 * sg.n
    f = psi.copy()
    exact = np.abs(f[:, None] - f[None, :])
    Pt = np.eye(sg.n)
    for _ in range(H):
        f = sg.P @ f
        Pt = Pt @ sg.P
        exact = np.maximum(exact, np.abs(f[:, None] - f[None, :]))
    Pi = sg.cesaro_limit()
    e = np.abs(Pt - Pi).sum(axis=1)
    lim = Pi @ psi
    sup = np.max(np.abs(psi))
    tail = np.abs(lim[:, None] - lim[None, :]) + sup * (e[:, None] + e[None, :])
    return EPropertyTable(np.maximum(exact, tail), exact, tail, e, H, sg.dist)


@dataclass
class AvgBounded:
    members: np.ndarray  # boolean mask of B
    center: int
    radius: float
    T_witness: int
    occupation: float  # min over x in A of the Cesaro occupation at T_witness
    limit_occupation: float


def _cesaro_occupation(sg, A_idx, B, T):
    """min over x in A of (1/T) sum_{s<T} delta_x P^s(B), for T = 1..len."""
    mass = np.zeros(len(A_idx))
    mu = np.eye(sg.n)[A_idx]
    out = np.empty(T)
    for s in range(T):
        mass += mu[:, B].sum(axis=1)
        out[s] = mass.min() / (s + 1)
        mu = mu @ sg.P
    return out


def check_avg_bounded(sg: FiniteSemigroup, A, eps: float, t_max: int | None = None) -> AvgBounded:
    """Smallest ball B with Cesaro occupation > 1 - eps from every start in A.

    The limsup of the Cesaro average equals the occupation under Pi; the
    witness is the first horizon where the exact finite average clears
    1 - eps.  Falls back to the whole space, which always works.
    """
    A_idx = np.flatnonzero(np.asarray(A, dtype=bool)) if np.asarray(A).dtype == bool else np.asarray(A, dtype=int)
    if A_idx.size == 0:
        raise ValueError("A must be nonempty")
    t_max = t_max or 50 * sg.n
    Pi = sg.cesaro_limit()
    D = sg.dist
    cands = sorted({(float(D[z, x]), z) for z in range(sg.n) for x in range(sg.n)})
    for r, z in cands:
        B = D[z] <= r + 1e-12
        lim = float(Pi[A_idx][:, B].sum(axis=1).min())
        if lim <= 1 - eps:
            continue
        occ = _cesaro_occupation(sg, A_idx, B, t_max)
        hit = np.flatnonzero(occ > 1 - eps)
        if hit.size:
            T = int(hit[0]) + 1
            return AvgBounded(B, z, r, T, float(occ[T - 1]), lim)
    B = np.ones(sg.n, dtype=bool)
    return AvgBounded(B, 0, float(D[0].max()), 1, 1.0, 1.0)


def check_concentrating(sg: FiniteSemigroup, z: int, eps: float, A=None, t_max: int | None = None,
                        return_time: bool = False):
    """alpha = max_{1 <= t <= t_max} min_{x in A} P^t(x, B(z, eps)); 0 if never positive.

    Linearity reduces the worst case over measures supported in A to Dirac
    starts.
    """
    A_idx = np.arange(sg.n) if A is None else (
        np.flatnonzero(A) if np.asarray(A).dtype == bool else np.asarray(A, dtype=int))
    t_max = t_max or 50 * sg.n
    B = sg.ball(z, eps)
    rows = np.eye(sg.n)[A_idx]
    best, best_t = 0.0, 0
    for t in range(1, t_max + 1):
        rows = rows @ sg.P
        # mass outside B is exactly 0 when B is everything; summing inside is not
        a = float(max(0.0, 1.0 - rows[:, ~B].sum(axis=1).max()))
        if a > best + 1e-15:
            best, best_t = a, t
    return (best, best_t) if return_time else best


# ---------------------------------------------------------------------------
# constructive decomposition
# ---------------------------------------------------------------------------


@dataclass
class Decomposition:
    gamma: float
    alpha: float
    delta: float
    eps: float
    z: int
    k: int
    times: list
    nu_pairs: list  # [(nu_j^1, nu_j^2)]
    mu_tails: list  # [(mu_l^1, mu_l^2)] for l = 0..k
    residual: float
    oscillation: float  # sup_t sup_{x,y in B(z,delta)} |P^t phi(x) - P^t phi(y)|
    predicted_bound: float
    phi_sup: float
    notes: list = field(default_factory=list)

    @property
    def total_time(self) -> int:
        return int(sum(self.times))

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "alpha": self.alpha, "delta": self.delta, "eps": self.eps,
            "z": self.z, "k": self.k, "times": [int(t) for t in self.times],
            "total_time": self.total_time, "decomposition_residual": self.residual,
            "oscillation": self.oscillation, "predicted_bound": self.predicted_bound,
            "phi_sup": self.phi_sup,
            "nu_pairs": [[a.tolist(), b.tolist()] for a, b in self.nu_pairs],
            "final_tails": [self.mu_tails[-1][0].tolist(), self.mu_tails[-1][1].tolist()],
            "notes": self.notes,
        }


def decomposition_residual(sg: FiniteSemigroup, mu1, mu2, gamma, times, nu_pairs, tails) -> float:
    """max over l and i of |P^{t_1+..+t_l} mu_i - (sum_j gamma (1-gamma)^{j-1} P^{t_{j+1}+..+t_l} nu_j^i + (1-gamma)^l mu_l^i)|.

    The nu-sum is carried forward as one vector: S_{l+1} = S_l P^{t_{l+1}} + gamma (1-gamma)^l nu_{l+1}.
    """
    worst = 0.0
    for i, mu in enumerate((mu1, mu2)):
        lhs = np.asarray(mu, dtype=float)
        S = np.zeros_like(lhs)
        for l in range(1, len(times) + 1):
            t = times[l - 1]
            lhs = sg.push(lhs, t)
            S = sg.push(S, t) + gamma * (1 - gamma) ** (l - 1) * np.asarray(nu_pairs[l - 1][i], dtype=float)
            rhs = S + (1 - gamma) ** l * tails[l][i]
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def choose_delta(sg: FiniteSemigroup, phi, z: int, eps: float, table: EPropertyTable | None = None) -> tuple:
    """Largest radius whose ball has sup_t oscillation of P^t phi below eps/2."""
    table = table or check_e_property(sg, phi)
    D = sg.dist[z]
    best = (0.0, 0.0)
    for r in sorted(set(D.tolist())):
        B = D <= r + 1e-12
        osc = float(table.modulus[np.ix_(B, B)].max())
        if osc < eps / 2:
            best = (r, osc)
        else:
            break
    return best


def build_decomposition(sg: FiniteSemigroup, mu1, mu2, z: int, delta: float | None, eps: float, phi,
                        t_max: int | None = None, max_stages: int = 100000) -> Decomposition:
    """Run the induction: split off gamma-mass in B(z, delta) stage by stage.

    gamma = alpha eps / 2 with alpha the uniform concentration level on
    B(z, delta); k is the least integer with 4 (1-gamma)^k ||phi|| <= eps.
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    phi = np.asarray(phi, dtype=float)
    for mu in (mu1, mu2):
        if np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
            raise ValueError("initial measures must be probability vectors")
    t_max = t_max or 50 * sg.n
    table = check_e_property(sg, phi)
    if delta is None:
        delta, osc = choose_delta(sg, phi, z, eps, table)
    else:
        B = sg.ball(z, delta)
        osc = float(table.modulus[np.ix_(B, B)].max())
    notes = []
    if osc >= eps / 2:
        notes.append(f"oscillation {osc:.3g} on B(z, delta) is not below eps/2")
    alpha, _ = check_concentrating(sg, z, delta, t_max=t_max, return_time=True)
    if alpha <= 0:
        raise HypothesisError(f"stage 1: no time up to {t_max} puts positive mass in B(z, {delta}) from every start")
    gamma = alpha * eps / 2
    if gamma >= 1:
        raise ValueError("need alpha * eps / 2 < 1")
    sup = float(np.max(np.abs(phi)))
    k = 0
    while 4 * (1 - gamma) ** k * sup > eps:
        k += 1
        if k > max_stages:
            raise RuntimeError("too many stages")
    B = sg.ball(z, delta)
    times, nus, tails = [], [], [(mu1.copy(), mu2.copy())]
    for l in range(1, k + 1):
        cur = tails[-1]
        rows = [cur[0].copy(), cur[1].copy()]
        t_found = None
        for t in range(1, t_max + 1):
            rows = [r @ sg.P for r in rows]
            # mass drift from round-off over many stages is far below 1e-9
            if min(r[B].sum() for r in rows) >= alpha * (1 - 1e-9):
                t_found = t
                break
        if t_found is None:
            raise HypothesisError(f"stage {l}: mass alpha={alpha:.3g} in B(z, delta) never reached within {t_max} steps")
        nu_pair, tail = [], []
        for r in rows:
            m = r[B].sum()
            nu = np.where(B, r, 0.0) / m
            nu_pair.append(nu)
            tail.append((r - gamma * nu) / (1 - gamma))
        times.append(t_found)
        nus.append(tuple(nu_pair))
        tails.append(tuple(tail))
    res = decomposition_residual(sg, mu1, mu2, gamma, times, nus, tails) if k else 0.0
    bound = (1 - (1 - gamma) ** k) * osc + 2 * (1 - gamma) ** k * sup
    return Decomposition(gamma, alpha, float(delta), eps, z, k, times, nus, tails, res, osc, bound, sup, notes)


def verify_stability_bruteforce(sg: FiniteSemigroup, mu1, mu2, phis, T_max: int, eps: float | None = None,
                                t_start: int = 0) -> ProbeReport:
    """Exact max_phi |<phi, mu1 P^t> - <phi, mu2 P^t>| for t = 0..T_max.

    With eps given, passes iff the difference stays <= eps for t >= t_start;
    otherwise passes iff the difference at T_max is below 1e-9.  A tail bound
    through the Cesaro limit extends the verdict beyond T_max.
    """
    phis = np.atleast_2d(np.asarray(phis, dtype=float))  # (K, n)
    a = np.asarray(mu1, dtype=float)
    b = np.asarray(mu2, dtype=float)
    diff = np.empty(T_max + 1)
    for t in range(T_max + 1):
        diff[t] = np.max(np.abs(phis @ (a - b)))
        a = a @ sg.P
        b = b @ sg.P
    Pi = sg.cesaro_limit()
    limit_gap = float(np.max(np.abs(phis @ ((np.asarray(mu1) - np.asarray(mu2)) @ Pi))))
    sup = float(np.max(np.abs(phis)))
    # L1 distance of the time-T_max laws from their limits bounds every later time
    a_prev = np.asarray(mu1, dtype=float) @ np.linalg.matrix_power(sg.P, T_max)
    b_prev = np.asarray(mu2, dtype=float) @ np.linalg.matrix_power(sg.P, T_max)
    tail = limit_gap + sup * (np.abs(a_prev - np.asarray(mu1) @ Pi).sum() + np.abs(b_prev - np.asarray(mu2) @ Pi).sum())
    if eps is not None:
        window = diff[t_start:]
        ok = bool(np.all(window <= eps)) and tail <= eps
        rule = "max_phi |<phi, P^t mu1 - P^t mu2>| <= eps for all t >= t_start (exact to T_max, tail bound beyond)"
    else:
        ok = bool(diff[-1] <= 1e-9)
        rule = "difference at T_max below 1e-9"
    return ProbeReport(
        "finite-stability",
        {"T_max": T_max, "eps": eps, "t_start": t_start, "n": sg.n},
        estimates={"final_difference": float(diff[-1]), "max_after_start": float(diff[t_start:].max()),
                   "limit_gap": limit_gap, "tail_bound": float(tail)},
        stderrs={},
        bounds={"eps": eps},
        verdict=PASS if ok else FAIL,
        rule=rule,
        arrays={"difference": diff},
    )
