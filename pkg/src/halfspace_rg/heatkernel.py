"""One-dimensional heat kernels on the line and the half-line.

Conventions
-----------
``lam`` is the variance of the Gaussian, so the bulk kernel is
``(2 pi lam)^(-1/2) exp(-(z1 - z2)^2 / (2 lam))``.

Two normalisations of the reflected kernel are in circulation.  ``p_neumann``
keeps the halved image sum by default (``halved=True``).  ``p_robin`` is built
on the unhalved image sum ``p_B(z - z') + p_B(z + z')`` because that is the
only choice for which the Robin kernel solves the heat equation with the
boundary condition ``d/dz p = c p`` and tends to the Dirichlet kernel as
``c -> inf``.  Pass ``halved=True`` to get the other variant; it violates
the boundary condition and exists so that this can be demonstrated.

Values below ``UNDERFLOW`` are flushed to exactly zero.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize
from scipy.special import erfcx, roots_laguerre

DIRICHLET = math.inf
UNDERFLOW = 1e-300
_SQRT_PI = math.sqrt(math.pi)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    pass


class UnsupportedOrder(ValueError):
    pass


def _flush(v):
    v = np.asarray(v, dtype=float)
    return np.where(np.abs(v) < UNDERFLOW, 0.0, v)


def _check_lam(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise DomainError("heat-kernel time must be strictly positive")
    return lam


def _check_halfline(*zs):
    out = []
    for z in zs:
        z = np.asarray(z, dtype=float)
        if np.any(z < 0) or np.any(np.isnan(z)):
            raise DomainError("half-line coordinates must be >= 0")
        out.append(z)
    return out


def _check_c(c):
    c = np.asarray(c, dtype=float)
    if np.any(c < 0) or np.any(np.isnan(c)):
        raise DomainError("Robin constant must be >= 0")
    return c


@dataclass(frozen=True)
class HeatKernelQuery:
    lam: float
    z1: float
    z2: float
    c: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError("lam must be > 0")
        if self.c < 0 or math.isnan(self.c):
            raise DomainError("c must be >= 0 (math.inf for Dirichlet)")


@dataclass(frozen=True)
class DeltaTolerance:
    delta: float = 0.25
    delta_prime: float = 0.25

    def __post_init__(self):
        if not 0 < self.delta < 0.5:
            raise DomainError("delta must lie in (0, 1/2)")
        if not 0 < self.delta_prime < 1:
            raise DomainError("delta_prime must lie in (0, 1)")

    @property
    def b_const(self) -> float:
        return 2 * (1 + 2 * self.delta) / (1 - 2 * self.delta)

    def tau_delta(self, tau):
        return (1 + self.delta) * np.asarray(tau, dtype=float)


# ---------------------------------------------------------------------------
# kernels

def p_bulk(lam, z1, z2):
    """Gaussian kernel on the whole line (any real z1, z2)."""
    lam = _check_lam(lam)
    d = np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)
    return _flush(np.exp(-d * d / (2 * lam)) / np.sqrt(2 * np.pi * lam))


def p_neumann(lam, z1, z2, halved=True):
    lam = _check_lam(lam)
    z1, z2 = _check_halfline(z1, z2)
    s = p_bulk(lam, z1, z2) + p_bulk(lam, z1, -z2)
    return _flush(0.5 * s if halved else s)


def _robin_deficit(u):
    """h(u) = 1 - sqrt(pi) u erfcx(u) for u >= 0, without cancellation."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = u < 2.0
    us = u[small]
    out[small] = 1.0 - _SQRT_PI * us * erfcx(us)
    ul = u[~small]
    if ul.size:
        t = np.zeros_like(ul)
        # continued fraction of erfcx, evaluated bottom-up
        for k in range(80, 0, -1):
            t = (0.5 * k) / (ul + t)
        out[~small] = t / (ul + t)
    return out


def _robin_parts(lam, a, c):
    """Return (g, 1 + g) with p_B(a) * g = p_B(a) - robin subtraction."""
    lam, a, c = np.broadcast_arrays(np.asarray(lam, float), np.asarray(a, float),
                                    np.asarray(c, float))
    g = np.empty(lam.shape)
    onepg = np.empty(lam.shape)
    inf = np.isinf(c)
    g[inf] = -1.0
    onepg[inf] = 0.0
    fin = ~inf
    s = np.sqrt(2 * lam[fin])
    v = a[fin] / s
    u = v + c[fin] * lam[fin] / s
    ex = erfcx(u)
    h = _robin_deficit(u)
    onepg[fin] = 2 * h + 2 * _SQRT_PI * v * ex
    g[fin] = onepg[fin] - 1.0
    return g, onepg


def robin_subtraction(lam, a, c):
    """2 int_0^inf dw e^{-w} p_B(lam; a + w/c), in closed form.

    Equals ``c * erfcx((a + c lam)/sqrt(2 lam)) * exp(-a^2/(2 lam))``.
    """
    lam = _check_lam(lam)
    a = np.asarray(a, dtype=float)
    c = _check_c(c)
    g, onepg = _robin_parts(lam, a, c)
    return _flush((1.0 - g) * p_bulk(lam, a, 0.0))


def p_robin(lam, z1, z2, c, halved=False):
    """Robin heat kernel on the half-line; c=0 is Neumann, c=inf Dirichlet."""
    lam = _check_lam(lam)
    z1, z2 = _check_halfline(z1, z2)
    c = _check_c(c)
    direct = p_bulk(lam, z1, z2)
    if c.ndim == 0 and not halved and (c == 0 or np.isinf(c)):
        if c == 0:
            return _flush(direct + p_bulk(lam, z1, -z2))
        return _flush(-direct * np.expm1(-2 * z1 * z2 / lam))
    g, onepg = _robin_parts(lam, z1 + z2, c)
    # p_B(-) [ (1+g) + g expm1(-2 z z'/lam) ]: both pieces non-negative when g<0
    val = direct * (onepg + g * np.expm1(-2 * z1 * z2 / lam))
    c0 = (c == 0)
    if np.any(c0):
        val = np.where(c0, direct + p_bulk(lam, z1, -z2), val)
    if halved:
        val = val - 0.5 * (direct + p_bulk(lam, z1, -z2))
    return _flush(val)


def p_robin_quad(lam, z1, z2, c, halved=False):
    """Scalar reference value of the Robin kernel by adaptive quadrature in w."""
    if not lam > 0:
        raise DomainError("lam must be > 0")
    if z1 < 0 or z2 < 0 or c < 0:
        raise DomainError("negative argument")
    base = float(p_neumann(lam, z1, z2, halved=halved))
    if c == 0:
        return base
    a = z1 + z2
    if math.isinf(c):
        return base - 2 * float(p_bulk(lam, a, 0.0))
    norm = 1.0 / math.sqrt(2 * math.pi * lam)
    # in x = a + w/c the integrand is c e^{-c(x-a)} e^{-x^2/2lam}; break the
    # range at the natural scales of both factors
    sl = math.sqrt(lam)
    cuts = sorted({a + k / c for k in (1.0, 5.0, 20.0, 60.0)} |
                  {a + k * sl for k in (0.5, 2.0, 6.0, 12.0, 40.0)})
    hi = min(a + 60.0 / c, a + 40.0 * sl)
    pts = [a] + [x for x in cuts if a < x < hi] + [hi]

    def quad_sum(f):
        return math.fsum(integrate.quad(f, lo, up, epsabs=0, epsrel=1e-13, limit=200)[0]
                         for lo, up in zip(pts[:-1], pts[1:]))

    if c * sl < 1.0 or halved:
        tot = quad_sum(lambda x: c * math.exp(-c * (x - a) - x * x / (2 * lam)))
        return base - 2 * norm * tot
    # integrate by parts once so that nothing cancels near the Dirichlet limit
    tail = quad_sum(lambda x: x * math.exp(-c * (x - a) - x * x / (2 * lam)))
    direct = float(p_bulk(lam, z1, z2))
    return -direct * math.expm1(-2 * z1 * z2 / lam) + 2 * norm * tail / lam


def eval_pB(q: HeatKernelQuery) -> float:
    return float(p_bulk(q.lam, q.z1, q.z2))


def eval_pN(q: HeatKernelQuery) -> float:
    return float(p_neumann(q.lam, q.z1, q.z2, halved=True))


def eval_pR(q: HeatKernelQuery) -> float:
    return float(p_robin(q.lam, q.z1, q.z2, q.c))


def eval_pR_diff(tau, z, z_ref, y, c):
    """p_R(tau; z, y) - p_R(tau; z_ref, y)."""
    if np.all(np.asarray(z) == np.asarray(z_ref)):
        return np.zeros(np.broadcast(z, z_ref, y).shape)[()] * 0.0
    return p_robin(tau, z, y, c) - p_robin(tau, z_ref, y, c)


# ---------------------------------------------------------------------------
# derivatives

def hermite_P(k, x):
    """Polynomials with d^k/dz^k p_B = lam^{-k/2} P_k((z-y)/sqrt(lam)) p_B.

    P_0 = 1, P_{k+1} = P_k' - x P_k.
    """
    coeffs = np.array([1.0])  # ascending powers
    for _ in range(k):
        der = coeffs[1:] * np.arange(1, coeffs.size)
        shifted = np.concatenate([[0.0], coeffs])
        nxt = -shifted
        nxt[:der.size] += der
        coeffs = nxt
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), coeffs)


def dz_p_bulk(k, lam, z, y):
    """k-th derivative in the first argument of p_B(lam; z, y)."""
    lam = _check_lam(lam)
    x = (np.asarray(z, float) - np.asarray(y, float)) / np.sqrt(lam)
    return _flush(lam ** (-k / 2) * hermite_P(k, x) * p_bulk(lam, z, y))


_GL_X, _GL_W = roots_laguerre(64)


def _dsub(k, lam, a, c):
    """k-th derivative in a of the Robin subtraction term."""
    lam, a, c = np.broadcast_arrays(np.asarray(lam, float), np.asarray(a, float),
                                    np.asarray(c, float))
    out = np.empty(lam.shape)
    inf = np.isinf(c)
    out[inf] = 2 * dz_p_bulk(k, lam[inf], a[inf], 0.0)
    fin = ~inf
    if not np.any(fin):
        return out
    lf, af, cf = lam[fin], a[fin], c[fin]
    stiff = cf * np.sqrt(lf) > 8.0
    res = np.empty(lf.shape)
    # moderate c: R^(j+1) = c (R^(j) - 2 p_B^(j)), started from the stable R - 2 p_B
    m = ~stiff
    if np.any(m):
        lm, am, cm = lf[m], af[m], cf[m]
        _, onepg = _robin_parts(lm, am, cm)
        diff = -onepg * p_bulk(lm, am, 0.0)
        if k == 0:
            r = 2 * p_bulk(lm, am, 0.0) + diff
        else:
            r = cm * diff
            for j in range(1, k):
                r = cm * (r - 2 * dz_p_bulk(j, lm, am, 0.0))
        res[m] = r
    # large c sqrt(lam): 2 int e^{-w} p_B^(k)(a + w/c) dw by Gauss-Laguerre
    if np.any(stiff):
        ls, as_, cs = lf[stiff], af[stiff], cf[stiff]
        pts = as_[:, None] + _GL_X[None, :] / cs[:, None]
        vals = dz_p_bulk(k, ls[:, None], pts, 0.0)
        res[stiff] = 2 * vals @ _GL_W
    out[fin] = res
    return out


def dz_p_robin(k, lam, z, y, c, halved=False):
    """k-th derivative of p_R(lam; z, y) in z, for 0 <= k <= 3."""
    if k > 3 or k < 0:
        raise UnsupportedOrder("derivative order must be 0..3")
    lam = _check_lam(lam)
    z, y = _check_halfline(z, y)
    c = _check_c(c)
    if k == 0:
        return p_robin(lam, z, y, c, halved=halved)
    image = dz_p_bulk(k, lam, z + y, 0.0)
    val = dz_p_bulk(k, lam, z, y) + image - _dsub(k, lam, z + y, c)
    if halved:
        val = val - 0.5 * (dz_p_bulk(k, lam, z, y) + image)
    return _flush(val)


def dt_pB_derivative(k, tau, t, u, v, y):
    """d^k/dt^k of p_B(tau; t u + (1-t) v, y)."""
    if k > 3 or k < 0:
        raise UnsupportedOrder("derivative order must be 0..3")
    tau = _check_lam(tau)
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise DomainError("t must lie in [0, 1]")
    z = t * np.asarray(u, float) + (1 - t) * np.asarray(v, float)
    x = (z - np.asarray(y, float)) / np.sqrt(tau)
    du = np.asarray(u, float) - np.asarray(v, float)
    return _flush(du ** k * tau ** (-k / 2) * hermite_P(k, x) * p_bulk(tau, z, y))


def dt_pR_derivative(k, tau, t, u, v, y, c):
    """d^k/dt^k of p_R(tau; t u + (1-t) v, y)."""
    t = np.asarray(t, dtype=float)
    z = t * np.asarray(u, float) + (1 - t) * np.asarray(v, float)
    du = np.asarray(u, float) - np.asarray(v, float)
    return du ** k * dz_p_robin(k, tau, z, y, c)


# ---------------------------------------------------------------------------
# constants appearing in the inequalities

def _sup_abs(fun, lo=0.0, hi=60.0, n=120001):
    x = np.linspace(lo, hi, n)
    vals = np.abs(fun(x))
    i = int(np.argmax(vals))
    a, b = x[max(i - 1, 0)], x[min(i + 1, n - 1)]
    res = optimize.minimize_scalar(lambda s: -abs(float(fun(np.array([s]))[0])),
                                   bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-12})
    return max(float(vals[i]), -float(res.fun))


@functools.lru_cache(maxsize=None)
def moment_constant(r):
    """2^{(r+1)/2} sup |x^r e^{-x^2/2}|."""
    return 2 ** ((r + 1) / 2) * _sup_abs(lambda x: x ** r * np.exp(-x * x / 2))


@functools.lru_cache(maxsize=None)
def C_k_delta(k, delta):
    """sup_x |P_k(x) exp(-x^2 delta / ((1+delta)(1+2 delta)))|."""
    e = delta / ((1 + delta) * (1 + 2 * delta))
    return _sup_abs(lambda x: hermite_P(k, x) * np.exp(-x * x * e), lo=-60.0)


@functools.lru_cache(maxsize=None)
def C_delta(delta):
    e = delta / (2 * (1 + delta) * (1 + 2 * delta))
    return math.sqrt((1 + 2 * delta) / (1 + delta)) * _sup_abs(lambda x: x * np.exp(-x * x * e))


# ---------------------------------------------------------------------------
# inequality predicates; each returns (lhs, rhs) arrays so callers can report
# the ratio as well as a pass flag

def normalization_integral(tau, z):
    f = lambda u: float(p_bulk(tau, z, u))
    s = math.sqrt(tau)
    return integrate.quad(f, z - 40 * s, z + 40 * s, epsabs=0, epsrel=1e-13,
                          points=[z], limit=200)[0]


def semigroup_integral(tau1, tau2, z1, z2, lower=-np.inf):
    f = lambda u: float(p_bulk(tau1, z1, u) * p_bulk(tau2, u, z2))
    # the product is a Gaussian in u centred at the variance-weighted mean
    mu = (tau2 * z1 + tau1 * z2) / (tau1 + tau2)
    sig = math.sqrt(tau1 * tau2 / (tau1 + tau2))
    lo = max(lower, mu - 40 * sig)
    hi = mu + 40 * sig
    if hi <= lo:
        return 0.0
    pts = [p for p in (mu,) if lo < p < hi]
    return integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, points=pts or None,
                          limit=200)[0]


_LEG_X, _LEG_W = np.polynomial.legendre.leggauss(20)


def _panel_integral(f, lo, hi, panels=64, chunk=512):
    """Composite Gauss-Legendre of f(row, x) over [lo, hi] for each row.

    Fixed rule, vectorised over rows; used for the large randomized identity runs
    where one adaptive quad per input is too slow.
    """
    lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
    out = np.empty(lo.size)
    frac = np.linspace(0.0, 1.0, panels + 1)
    for i in range(0, lo.size, chunk):
        sl = slice(i, i + chunk)
        e = lo[sl, None] + (hi - lo)[sl, None] * frac[None, :]
        half = 0.5 * (e[:, 1:] - e[:, :-1])
        x = (0.5 * (e[:, 1:] + e[:, :-1]))[..., None] + half[..., None] * _LEG_X
        out[sl] = np.sum(f(sl, x) * (half[..., None] * _LEG_W), axis=(1, 2))
    return out


def normalization_integral_batch(tau, z):
    tau, z = np.broadcast_arrays(np.asarray(tau, float), np.asarray(z, float))
    s = np.sqrt(tau)
    return _panel_integral(lambda sl, x: p_bulk(tau[sl, None, None], z[sl, None, None], x),
                           z - 40 * s, z + 40 * s)


def semigroup_integral_batch(tau1, tau2, z1, z2, lower=-np.inf):
    t1, t2, a, b = np.broadcast_arrays(*(np.asarray(v, float) for v in (tau1, tau2, z1, z2)))
    mu = (t2 * a + t1 * b) / (t1 + t2)
    sig = np.sqrt(t1 * t2 / (t1 + t2))
    lo = np.maximum(lower, mu - 40 * sig)
    hi = mu + 40 * sig
    vals = _panel_integral(lambda sl, x: p_bulk(t1[sl, None, None], a[sl, None, None], x) *
                           p_bulk(t2[sl, None, None], x, b[sl, None, None]), lo, np.maximum(hi, lo))
    return np.where(hi > lo, vals, 0.0)


def halfline_comparison_batch(tau1, tau2, z1, z2):
    full = semigroup_integral_batch(tau1, tau2, z1, z2)
    return full, 2 * semigroup_integral_batch(tau1, tau2, z1, z2, lower=0.0)


def halfline_comparison(tau1, tau2, z1, z2):
    full = semigroup_integral(tau1, tau2, z1, z2)
    half = semigroup_integral(tau1, tau2, z1, z2, lower=0.0)
    return full, 2 * half


def moment_bound(r, tau, z1, z2):
    """|z1-z2|^r p_B(tau) against C tau^{r/2} p_B(2 tau).

    With p_B(tau) on the right, as printed, the bound fails for large
    separations; the constant C is exactly the one for p_B(2 tau).
    """
    lhs = np.abs(np.asarray(z1) - np.asarray(z2)) ** r * p_bulk(tau, z1, z2)
    rhs = moment_constant(r) * np.asarray(tau) ** (r / 2) * p_bulk(2 * np.asarray(tau), z1, z2)
    return lhs, rhs


def moment_bound_as_printed(r, tau, z1, z2):
    lhs = np.abs(np.asarray(z1) - np.asarray(z2)) ** r * p_bulk(tau, z1, z2)
    rhs = moment_constant(r) * np.asarray(tau) ** (r / 2) * p_bulk(tau, z1, z2)
    return lhs, rhs


def inflation_bound(delta, tau, z1, z2):
    return p_bulk(tau, z1, z2), np.sqrt(1 + np.asarray(delta)) * p_bulk((1 + delta) * np.asarray(tau), z1, z2)


def robin_domination(lam, z1, z2, c):
    return p_robin(lam, z1, z2, c), 2 * p_bulk(lam, z1, z2)


def dt_bound(k, delta, tau, t, u, v, y):
    lhs = np.abs(dt_pB_derivative(k, tau, t, u, v, y))
    z = t * u + (1 - t) * v
    rhs = C_k_delta(k, delta) * np.abs(u - v) ** k * tau ** (-k / 2) * p_bulk((1 + delta) * tau, z, y)
    return lhs, rhs


def dt_robin_bound(k, delta, tau, t, u, v, y, c):
    lhs = np.abs(dt_pR_derivative(k, tau, t, u, v, y, c))
    z = np.asarray(t) * u + (1 - np.asarray(t)) * v
    rhs = 4 * C_k_delta(k, delta) * np.abs(u - v) ** k * tau ** (-k / 2) * \
        p_bulk((1 + delta) * tau, z, y)
    return lhs, rhs


_T_NODES, _T_WEIGHTS = np.polynomial.legendre.leggauss(48)
_T_NODES = 0.5 * (_T_NODES + 1)
_T_WEIGHTS = 0.5 * _T_WEIGHTS


def lemma37(delta, delta_prime, Lam, Lam_I, tau, z1, z2, y1, constant="stated"):
    """Both sides of the one-line-plus-interpolation bound.

    ``constant="stated"`` uses C_delta alone; ``"corrected"`` multiplies it by
    sqrt(2/(1+2 delta)) (1+delta'), the prefactor the Gaussian bookkeeping
    actually produces.  Admissibility requires delta' Lam^2 >= b / tau and
    Lam_I >= Lam.
    """
    b = 2 * (1 + 2 * delta) / (1 - 2 * delta)
    if delta_prime * Lam ** 2 < b / tau * (1 - 1e-12) or Lam_I < Lam:
        raise DomainError("configuration outside the lemma's hypotheses")
    d = abs(z1 - z2)
    pts = _T_NODES * z2 + (1 - _T_NODES) * z1
    inner = float(p_bulk(tau * (1 + delta_prime), pts, y1) @ _T_WEIGHTS)
    lhs = d * float(p_bulk((1 + delta) / Lam_I ** 2, z1, z2)) * inner
    pref = C_delta(delta) / Lam
    if constant == "corrected":
        pref *= math.sqrt(2 / (1 + 2 * delta)) * (1 + delta_prime)
    rhs = pref * float(p_bulk(2 / Lam_I ** 2, z1, z2)) * \
        float(p_bulk((1 + delta_prime) ** 3 * tau, z1, y1))
    return lhs, rhs
