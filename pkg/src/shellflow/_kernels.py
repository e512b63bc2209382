"""Compiled inner loops.

Everything here works on plain float arrays so numba can compile it.  Complex
states are carried as separate real/imaginary arrays inside the loops, which
is several times faster than numba's complex arithmetic.  The public modules
wrap these with validation and complex-valued signatures.

Index convention: slot ``j`` holds shell ``n = j + 1``.  Ghost shells
(``n <= 0`` and ``n > N``) are zero and never stored.
"""

import math

import numpy as np
from numba import njit, prange

GOY = 0
SABRA = 1

G_NONE = 0
G_CONST = 1
G_CONTROL = 2

BLOWUP_NORM2 = 1e16  # |u| > 1e8

_MASK32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_SH11 = np.uint64(11)
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_TWO_POW_M53 = 1.0 / 9007199254740992.0
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


# --------------------------------------------------------------------------
# counter-based RNG
# --------------------------------------------------------------------------


@njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10. All arguments are uint64 values holding 32-bit words."""
    for r in range(10):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        hi0 = p0 >> _SH32
        lo0 = p0 & _MASK32
        hi1 = p1 >> _SH32
        lo1 = p1 & _MASK32
        c0 = (hi1 ^ c1 ^ k0) & _MASK32
        c1 = lo1
        c2 = (hi0 ^ c3 ^ k1) & _MASK32
        c3 = lo0
        if r < 9:
            k0 = (k0 + _PHILOX_W0) & _MASK32
            k1 = (k1 + _PHILOX_W1) & _MASK32
    return c0, c1, c2, c3


@njit(cache=True, inline="always")
def ndtri(p):
    """Inverse standard normal CDF (Wichura, AS241 PPND16), p in (0, 1)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(cache=True, inline="always")
def gauss_pair(seed, stream, step, mode):
    """(re, im) of a standard complex Gaussian, E|g|^2 = 1, keyed on the counter."""
    s = np.uint64(seed)
    st = np.uint64(step)
    w0, w1, w2, w3 = philox4x32(
        st & _MASK32, st >> _SH32,
        np.uint64(stream) & _MASK32, np.uint64(mode) & _MASK32,
        s & _MASK32, s >> _SH32,
    )
    # 53-bit integers mapped into the open interval (0, 1)
    x1 = ((w0 << _SH32) | w1) >> _SH11
    x2 = ((w2 << _SH32) | w3) >> _SH11
    u1 = (x1 + 0.5) * _TWO_POW_M53
    u2 = (x2 + 0.5) * _TWO_POW_M53
    return ndtri(u1) * _INV_SQRT2, ndtri(u2) * _INV_SQRT2


@njit(cache=True)
def gauss_block(seed, streams, step0, nsteps, n_active, out_re, out_im):
    """out[p, s, m] <- Gaussian keyed on (seed, streams[p], step0 + s, m)."""
    for p in range(streams.shape[0]):
        for s in range(nsteps):
            for m in range(n_active):
                gr, gi = gauss_pair(seed, streams[p], step0 + s, m)
                out_re[p, s, m] = gr
                out_im[p, s, m] = gi


@njit(cache=True)
def ndtri_array(p):
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        out[i] = ndtri(p[i])
    return out


# --------------------------------------------------------------------------
# bilinear operator
# --------------------------------------------------------------------------


@njit(cache=True, inline="always")
def bilinear(ur, ui, vr, vi, k, a, b, variant, outr, outi):
    """[B(u, v)]_n for both models with zero ghost shells.

    GOY:   i(a k_{n+1} u*_{n+1} v*_{n+2} + b k_n u*_{n-1} v*_{n+1}
             - a k_{n-1} u*_{n-1} v*_{n-2} - b k_{n-1} u*_{n-2} v*_{n-1})
    Sabra: i(a k_{n+1} u*_{n+1} v_{n+2} + b k_n u*_{n-1} v_{n+1}
             + a k_{n-1} u_{n-1} v_{n-2} + b k_{n-1} u_{n-2} v_{n-1})
    """
    n = ur.shape[0]
    # GOY conjugates v everywhere and u in the backward terms, and
    # subtracts the backward terms
    sv = -1.0 if variant == GOY else 1.0
    for j in range(n):
        sr = 0.0
        si = 0.0
        if j + 2 < n:
            c = a * k[j + 1]
            xr = ur[j + 1]
            xi = -ui[j + 1]
            yr = vr[j + 2]
            yi = sv * vi[j + 2]
            sr += c * (xr * yr - xi * yi)
            si += c * (xr * yi + xi * yr)
        if j >= 1 and j + 1 < n:
            c = b * k[j]
            xr = ur[j - 1]
            xi = -ui[j - 1]
            yr = vr[j + 1]
            yi = sv * vi[j + 1]
            sr += c * (xr * yr - xi * yi)
            si += c * (xr * yi + xi * yr)
        if j >= 2:
            c1 = a * k[j - 1]
            c2 = b * k[j - 1]
            x1r = ur[j - 1]
            x1i = sv * ui[j - 1]
            y1r = vr[j - 2]
            y1i = sv * vi[j - 2]
            x2r = ur[j - 2]
            x2i = sv * ui[j - 2]
            y2r = vr[j - 1]
            y2i = sv * vi[j - 1]
            pr = c1 * (x1r * y1r - x1i * y1i) + c2 * (x2r * y2r - x2i * y2i)
            pi = c1 * (x1r * y1i + x1i * y1r) + c2 * (x2r * y2i + x2i * y2r)
            sr += sv * pr
            si += sv * pi
        # multiply by i
        outr[j] = -si
        outi[j] = sr


@njit(cache=True, inline="always")
def bilinear_sym(ur, ui, wr, wi, k, a, b, variant, tr, ti, outr, outi):
    """out <- B(u, w) + B(w, u)."""
    bilinear(ur, ui, wr, wi, k, a, b, variant, outr, outi)
    bilinear(wr, wi, ur, ui, k, a, b, variant, tr, ti)
    for j in range(ur.shape[0]):
        outr[j] += tr[j]
        outi[j] += ti[j]


@njit(cache=True)
def bilinear_rows(u, v, k, a, b, variant):
    """Row-wise B(u[p], v[p]) for complex (M, N) inputs."""
    m, n = u.shape
    out = np.empty_like(u)
    ur = np.empty(n)
    ui = np.empty(n)
    vr = np.empty(n)
    vi = np.empty(n)
    orr = np.empty(n)
    oi = np.empty(n)
    for p in range(m):
        for j in range(n):
            ur[j] = u[p, j].real
            ui[j] = u[p, j].imag
            vr[j] = v[p, j].real
            vi[j] = v[p, j].imag
        bilinear(ur, ui, vr, vi, k, a, b, variant, orr, oi)
        for j in range(n):
            out[p, j] = complex(orr[j], oi[j])
    return out


# --------------------------------------------------------------------------
# ensemble integrator
# --------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def run_ensemble(
    x0, nsteps, dt, refine, e_c, phi_c, e_f, sig_f, n_active,
    k, a, b, variant, seed, streams, record_every, m_proj,
    rec_proj, rec_h2, rec_diss, final, blowup_step,
):
    """Integrate independent paths with the exponential (ETD1) scheme.

    Per mode: u <- e^{-lam dt} u + phi B(u, u) + (exact OU increment), where
    phi = (1 - e^{-lam dt}) / lam.  With refine > 1 the OU increment over a
    step is assembled from `refine` fine sub-increments, so paths at dt and
    dt / refine share one Brownian path.  rec_diss is the trapezoid integral
    of ||u||^2.  Step 0 is recorded, then every `record_every` steps.
    """
    n_paths, n = x0.shape
    for p in prange(n_paths):
        ur = np.empty(n)
        ui = np.empty(n)
        br = np.empty(n)
        bi = np.empty(n)
        nzr = np.zeros(n)
        nzi = np.zeros(n)
        h2 = 0.0
        v2 = 0.0
        for j in range(n):
            ur[j] = x0[p, j].real
            ui[j] = x0[p, j].imag
            a2 = ur[j] * ur[j] + ui[j] * ui[j]
            h2 += a2
            v2 += k[j] * k[j] * a2
        diss = 0.0
        for j in range(m_proj):
            rec_proj[p, 0, j] = complex(ur[j], ui[j])
        rec_h2[p, 0] = h2
        rec_diss[p, 0] = 0.0
        blowup_step[p] = -1
        for s in range(nsteps):
            bilinear(ur, ui, ur, ui, k, a, b, variant, br, bi)
            for m in range(n_active):
                nzr[m] = 0.0
                nzi[m] = 0.0
            for r in range(refine):
                for m in range(n_active):
                    gr, gi = gauss_pair(seed, streams[p], s * refine + r, m)
                    nzr[m] = e_f[m] * nzr[m] + sig_f[m] * gr
                    nzi[m] = e_f[m] * nzi[m] + sig_f[m] * gi
            h2 = 0.0
            v2_new = 0.0
            for j in range(n):
                ur[j] = e_c[j] * ur[j] + phi_c[j] * br[j]
                ui[j] = e_c[j] * ui[j] + phi_c[j] * bi[j]
                if j < n_active:
                    ur[j] += nzr[j]
                    ui[j] += nzi[j]
                a2 = ur[j] * ur[j] + ui[j] * ui[j]
                h2 += a2
                v2_new += k[j] * k[j] * a2
            diss += 0.5 * dt * (v2 + v2_new)
            v2 = v2_new
            if not (h2 < BLOWUP_NORM2):
                blowup_step[p] = s + 1
                break
            if (s + 1) % record_every == 0:
                ri = (s + 1) // record_every
                for j in range(m_proj):
                    rec_proj[p, ri, j] = complex(ur[j], ui[j])
                rec_h2[p, ri] = h2
                rec_diss[p, ri] = diss
        for j in range(n):
            final[p, j] = complex(ur[j], ui[j])


# --------------------------------------------------------------------------
# tangent, Malliavin and control flows along the base path
# --------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def run_tangent(
    x0, v0, nsteps, dt, lam, e_c, phi_c, sig_c, q, cm_weight, n_active,
    k, a, b, variant, seed, streams, record_every,
    do_tan, g_mode, g_const, n_star,
    rec_u, rec_tan, rec_mal, rec_xi, rec_g, rec_ito, rec_g2, blowup_step,
):
    """Base path plus variational flow U, Malliavin flow D and control flow xi.

    U' = -lam U + B(u,U) + B(U,u),          U(0) = v
    D' = -lam D + B(u,D) + B(D,u) + Q g,    D(0) = 0
    xi: the first n_star modes shrink radially at rate dr/dt = -1/2 (exact,
    piecewise linear radius), the rest follow the variational equation.
    All flows use the base scheme's ETD1 splitting with coefficients frozen
    at the step start, so U is the exact derivative of the discrete map.

    rec_ito accumulates sum 2 Re(conj(g) * cm_weight * G): the Gaussian
    Cameron-Martin weight of the discrete scheme, which tends to
    2 int (g, dW) as dt -> 0.  rec_g2 accumulates int |g|^2 dt.
    """
    n_paths, n = x0.shape
    for p in prange(n_paths):
        ur = np.empty(n)
        ui = np.empty(n)
        tr = np.empty(n)
        ti = np.empty(n)
        dr = np.zeros(n)
        di = np.zeros(n)
        xr = np.empty(n)
        xim = np.empty(n)
        gr = np.zeros(n)
        gi = np.zeros(n)
        bur = np.empty(n)
        bui = np.empty(n)
        btr = np.zeros(n)
        bti = np.zeros(n)
        bdr = np.zeros(n)
        bdi = np.zeros(n)
        bxr = np.zeros(n)
        bxi = np.zeros(n)
        wr = np.empty(n)
        wi = np.empty(n)
        zr = np.zeros(n)
        zi = np.zeros(n)
        for j in range(n):
            ur[j] = x0[p, j].real
            ui[j] = x0[p, j].imag
            tr[j] = v0[p, j].real
            ti[j] = v0[p, j].imag
            xr[j] = tr[j]
            xim[j] = ti[j]
        r0 = 0.0
        for j in range(n_star):
            r0 += xr[j] * xr[j] + xim[j] * xim[j]
        r0 = math.sqrt(r0)
        ito = 0.0
        g2 = 0.0
        blowup_step[p] = -1

        for s in range(nsteps + 1):
            t = s * dt
            if g_mode == G_CONTROL:
                bilinear_sym(ur, ui, xr, xim, k, a, b, variant, wr, wi, bxr, bxi)
                alive = r0 > 0.0 and r0 - 0.5 * t > 0.0
                for j in range(n):
                    if j < n_star:
                        shr = 0.0
                        shi = 0.0
                        if alive:
                            shr = v0[p, j].real / (2.0 * r0)
                            shi = v0[p, j].imag / (2.0 * r0)
                        gr[j] = (-lam[j] * xr[j] + bxr[j] + shr) / q[j]
                        gi[j] = (-lam[j] * xim[j] + bxi[j] + shi) / q[j]
                    else:
                        gr[j] = 0.0
                        gi[j] = 0.0
            elif g_mode == G_CONST:
                for j in range(n):
                    gr[j] = g_const[j].real
                    gi[j] = g_const[j].imag

            if s % record_every == 0:
                ri = s // record_every
                for j in range(n):
                    rec_u[p, ri, j] = complex(ur[j], ui[j])
                    rec_tan[p, ri, j] = complex(tr[j], ti[j])
                    rec_mal[p, ri, j] = complex(dr[j], di[j])
                    rec_xi[p, ri, j] = complex(xr[j], xim[j])
                    rec_g[p, ri, j] = complex(gr[j], gi[j])
                rec_ito[p, ri] = ito
                rec_g2[p, ri] = g2
            if s == nsteps:
                break

            for m in range(n_active):
                zr[m], zi[m] = gauss_pair(seed, streams[p], s, m)
            bilinear(ur, ui, ur, ui, k, a, b, variant, bur, bui)
            if do_tan:
                bilinear_sym(ur, ui, tr, ti, k, a, b, variant, wr, wi, btr, bti)
            if g_mode != G_NONE:
                bilinear_sym(ur, ui, dr, di, k, a, b, variant, wr, wi, bdr, bdi)
                for j in range(n):
                    if j < n_active:
                        ito += 2.0 * cm_weight[j] * (gr[j] * zr[j] + gi[j] * zi[j])
                    g2 += dt * (gr[j] * gr[j] + gi[j] * gi[j])

            h2 = 0.0
            for j in range(n):
                if do_tan:
                    tr[j] = e_c[j] * tr[j] + phi_c[j] * btr[j]
                    ti[j] = e_c[j] * ti[j] + phi_c[j] * bti[j]
                if g_mode != G_NONE:
                    dr[j] = e_c[j] * dr[j] + phi_c[j] * (bdr[j] + q[j] * gr[j])
                    di[j] = e_c[j] * di[j] + phi_c[j] * (bdi[j] + q[j] * gi[j])
                if g_mode == G_CONTROL and j >= n_star:
                    xr[j] = e_c[j] * xr[j] + phi_c[j] * bxr[j]
                    xim[j] = e_c[j] * xim[j] + phi_c[j] * bxi[j]
                ur[j] = e_c[j] * ur[j] + phi_c[j] * bur[j]
                ui[j] = e_c[j] * ui[j] + phi_c[j] * bui[j]
                if j < n_active:
                    ur[j] += sig_c[j] * zr[j]
                    ui[j] += sig_c[j] * zi[j]
                h2 += ur[j] * ur[j] + ui[j] * ui[j]
            if g_mode == G_CONTROL:
                r_next = r0 - 0.5 * (s + 1) * dt
                for j in range(n_star):
                    if r0 > 0.0 and r_next > 0.0:
                        xr[j] = v0[p, j].real * (r_next / r0)
                        xim[j] = v0[p, j].imag * (r_next / r0)
                    else:
                        xr[j] = 0.0
                        xim[j] = 0.0
            if not (h2 < BLOWUP_NORM2):
                blowup_step[p] = s + 1
                break
