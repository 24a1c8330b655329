"""Half-line propagators in the mixed (transverse momentum, normal coordinate) form.

``C_pz`` are the textbook closed forms for a field of mass ``sqrt(p^2+m^2)``.
``C_reg`` is the heat-kernel regularised propagator

    C(p; z, z') = int_{1/Lam0^2}^{1/Lam^2} dlam exp(-lam (p^2+m^2)) p_R(lam; z, z').

The Gaussian pieces of ``C_reg`` are done in closed form with erfc; only the
Robin correction needs a quadrature in log(lam).

Because ``lam`` is a variance, ``C_reg`` at Lam=0, Lam0=inf decays like
exp(-sqrt(2) M |z - z'|) and equals ``2 * C_pz`` evaluated at mass
``sqrt(2) M`` with the same Robin constant.  See ``removed_cutoff_limit``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import erfcx

from . import heatkernel as hk

DIRICHLET, NEUMANN, ROBIN = "dirichlet", "neumann", "robin"
LAMBDA0_TAIL = 50.0  # lam_max = LAMBDA0_TAIL / m^2 when Lam = 0


class QuadratureError(RuntimeError):
    def __init__(self, msg, achieved):
        super().__init__(f"{msg} (achieved error estimate {achieved:.3e})")
        self.achieved = achieved


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str
    c: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in (DIRICHLET, NEUMANN, ROBIN):
            raise ValueError(f"unknown boundary condition {self.kind!r}")
        c = self.c
        if kind == ROBIN:
            if not c >= 0 or math.isnan(c):
                raise ValueError("Robin constant must be >= 0")
            if c == 0:
                kind = NEUMANN
            elif math.isinf(c):
                kind = DIRICHLET
        if kind == NEUMANN:
            c = 0.0
        elif kind == DIRICHLET:
            c = math.inf
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "c", float(c))

    @classmethod
    def robin(cls, c):
        return cls(ROBIN, c)

    def image_weight(self, M):
        """Relative weight of the image term for mass M."""
        if self.kind == NEUMANN:
            return np.ones_like(np.asarray(M, float))
        if self.kind == DIRICHLET:
            return -np.ones_like(np.asarray(M, float))
        return (M - self.c) / (M + self.c)


@dataclass(frozen=True)
class PropagatorSpec:
    m: float
    bc: BoundaryCondition = field(default_factory=lambda: BoundaryCondition(NEUMANN))
    lambda_low: float = 0.0
    lambda_high: float = 1.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")
        if not (0 <= self.lambda_low <= self.lambda_high < math.inf):
            raise ValueError("need 0 <= Lambda <= Lambda0 < inf")

    def with_cutoffs(self, lo, hi):
        return PropagatorSpec(self.m, self.bc, lo, hi)

    @property
    def lam_range(self):
        t1 = 1.0 / self.lambda_high ** 2
        t2 = LAMBDA0_TAIL / self.m ** 2 if self.lambda_low == 0 else 1.0 / self.lambda_low ** 2
        return t1, max(t1, t2)


def _mass(m, p):
    return np.sqrt(np.asarray(p, float) ** 2 + m * m)


# ---------------------------------------------------------------------------
# closed forms

def C_pz(bc: BoundaryCondition, m, p, z, zp):
    z, zp = hk._check_halfline(z, zp)
    M = _mass(m, p)
    r = bc.image_weight(M)
    near = np.minimum(z, zp)
    direct = np.exp(-M * np.abs(z - zp)) / (2 * M)
    if bc.kind == DIRICHLET:
        return direct * -np.expm1(-2 * M * near)
    return direct * (1 + r * np.exp(-2 * M * near))


def dz_C_pz_at_wall(bc: BoundaryCondition, m, p, zp):
    """Right derivative in z at z = 0 of C_pz(p; z, z') for z' > 0."""
    M = _mass(m, p)
    r = bc.image_weight(M)
    return np.exp(-M * np.asarray(zp, float)) * (1 - r) / 2


def bc_residual(bc: BoundaryCondition, m, p, zp):
    zp = np.asarray(zp, float)
    if np.any(zp <= 0):
        raise ValueError("z' must be > 0")
    if bc.kind == DIRICHLET:
        return C_pz(bc, m, p, 0.0, zp)
    d = dz_C_pz_at_wall(bc, m, p, zp)
    if bc.kind == NEUMANN:
        return d
    return d - bc.c * C_pz(bc, m, p, 0.0, zp)


# ---------------------------------------------------------------------------
# regularised propagator

def _gauss_laplace(T, x, M):
    """int_0^T dlam exp(-lam M^2) p_B(lam; x, 0) for x >= 0; T may be inf."""
    x = np.asarray(x, float)
    M = np.asarray(M, float)
    T = np.asarray(T, float)
    kap = math.sqrt(2.0) * M
    x, M, T, kap = np.broadcast_arrays(x, M, T, kap)
    out = np.empty(x.shape)
    inf = np.isinf(T)
    out[inf] = np.exp(-kap[inf] * x[inf]) / kap[inf]
    f = ~inf
    xf, Mf, Tf, kf = x[f], M[f], T[f], kap[f]
    rt = np.sqrt(Tf)
    y1 = xf / (math.sqrt(2.0) * rt) - Mf * rt
    y2 = xf / (math.sqrt(2.0) * rt) + Mf * rt
    expo = np.exp(-xf * xf / (2 * Tf) - Mf * Mf * Tf)
    t2 = erfcx(y2) * expo
    t1 = np.where(y1 >= 0, erfcx(np.abs(y1)) * expo,
                  2 * np.exp(-kf * xf) - erfcx(np.abs(y1)) * expo)
    out[f] = (t1 - t2) / (2 * math.sqrt(2.0) * Mf)
    return out


def gaussian_piece(t1, t2, x, M):
    """int_{t1}^{t2} dlam exp(-lam M^2) p_B(lam; x, 0)."""
    x = np.abs(np.asarray(x, float))
    if t1 == t2:
        return np.zeros(np.broadcast(x, M).shape)
    return _gauss_laplace(t2, x, M) - _gauss_laplace(t1, x, M)


def _robin_integrand(lam, a, M, c):
    g, onepg = hk._robin_parts(lam, a, c)
    return np.exp(-lam * M * M) * hk.p_bulk(lam, a, 0.0) * onepg


# composite Gauss-Legendre in log(lam): 16 nodes per panel, 4 panels per decade
_GL16 = np.polynomial.legendre.leggauss(16)


def loglam_rule(t1, t2, per_decade=4, order=16):
    """Nodes and weights for int_{t1}^{t2} f(lam) dlam on a log-lam panel rule."""
    if t2 <= t1:
        return np.zeros(0), np.zeros(0)
    x, w = _GL16 if order == 16 else np.polynomial.legendre.leggauss(order)
    u1, u2 = math.log(t1), math.log(t2)
    npan = max(1, math.ceil((u2 - u1) / math.log(10) * per_decade))
    edges = np.linspace(u1, u2, npan + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    u = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wu = (half[:, None] * w[None, :]).ravel()
    lam = np.exp(u)
    return lam, wu * lam


def robin_piece(spec: PropagatorSpec, p, a, adaptive=True):
    """int dlam exp(-lam M^2) p_B(lam; a) (1 + g): the Robin correction to the
    Dirichlet combination G(z - z') - G(z + z')."""
    c = spec.bc.c
    M = float(_mass(spec.m, p))
    t1, t2 = spec.lam_range
    if t1 == t2:
        return 0.0
    if not adaptive:
        lam, w = loglam_rule(t1, t2)
        vals = _robin_integrand(lam, float(a), M, c)
        return float(math.fsum(vals * w))

    def f(u):
        lam = math.exp(u)
        return float(_robin_integrand(lam, float(a), M, c)) * lam

    u1, u2 = math.log(t1), math.log(t2)
    # pieces at the natural scale a^2 of the Gaussian and 1/c^2 of the Robin layer
    brk = [math.log(s) for s in (a * a, 1.0 / (c * c) if c > 0 else 0.0) if s > 0]
    brk = sorted(b for b in brk if u1 < b < u2)
    pts = [u1] + brk + [u2]
    tot, err = [], 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        v, e = integrate.quad(f, lo, hi, epsabs=1e-12 * 1e-3, epsrel=1e-10, limit=200)
        tot.append(v)
        err += e
    val = math.fsum(tot)
    if err > max(1e-12, 1e-8 * abs(val)):
        raise QuadratureError("Robin lam-integral did not converge", err)
    return val


def C_reg(spec: PropagatorSpec, p, z, zp, adaptive=True):
    """Regularised propagator; scalar p, z, z' (use C_reg_matrix for grids)."""
    z, zp = float(z), float(zp)
    if z < 0 or zp < 0:
        raise hk.DomainError("half-line coordinates must be >= 0")
    t1, t2 = spec.lam_range
    if t1 == t2:
        return 0.0
    M = float(_mass(spec.m, p))
    if spec.lambda_low == 0:
        t2 = math.inf
    d = float(gaussian_piece(t1, t2, z - zp, M))
    img = float(gaussian_piece(t1, t2, z + zp, M))
    kind = spec.bc.kind
    if kind == NEUMANN:
        return d + img
    dirichlet = d - img
    if kind == DIRICHLET:
        return dirichlet
    return dirichlet + robin_piece(spec, p, z + zp, adaptive=adaptive)


def C_reg_matrix(spec: PropagatorSpec, p, zs):
    """C_reg on all pairs of a coordinate vector, with the fixed log-lam rule."""
    zs = np.asarray(zs, float)
    t1, t2 = spec.lam_range
    M = float(_mass(spec.m, p))
    if t1 == t2:
        return np.zeros((zs.size, zs.size))
    T2 = math.inf if spec.lambda_low == 0 else t2
    dz = zs[:, None] - zs[None, :]
    az = zs[:, None] + zs[None, :]
    d = gaussian_piece(t1, T2, dz, M)
    img = gaussian_piece(t1, T2, az, M)
    kind = spec.bc.kind
    if kind == NEUMANN:
        out = d + img
    elif kind == DIRICHLET:
        out = d - img
    else:
        lam, w = loglam_rule(t1, t2)
        K = _robin_integrand(lam[None, :], az.ravel()[:, None], M, spec.bc.c)
        out = d - img + (K @ w).reshape(az.shape)
    return 0.5 * (out + out.T)


def C_reg_quad(spec: PropagatorSpec, p, z, zp):
    """Independent reference: adaptive quadrature of the full p_R integrand."""
    t1, t2 = spec.lam_range
    if t1 == t2:
        return 0.0
    M = float(_mass(spec.m, p))
    c = spec.bc.c

    def f(u):
        lam = math.exp(u)
        return math.exp(-lam * M * M) * float(hk.p_robin(lam, z, zp, c)) * lam

    u1, u2 = math.log(t1), math.log(t2)
    n = max(2, int(u2 - u1) + 1)
    edges = np.linspace(u1, u2, n + 1)
    return math.fsum(integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
                     for lo, hi in zip(edges[:-1], edges[1:]))


def dz_C_reg_at_wall(spec: PropagatorSpec, p, zp):
    """d/dz C_reg(p; z, z') at z = 0, by quadrature of the analytic z-derivative of p_R."""
    t1, t2 = spec.lam_range
    if t1 == t2:
        return 0.0
    M = float(_mass(spec.m, p))
    c = spec.bc.c

    def f(u):
        lam = math.exp(u)
        return math.exp(-lam * M * M) * float(hk.dz_p_robin(1, lam, 0.0, zp, c)) * lam

    u1, u2 = math.log(t1), math.log(t2)
    n = max(2, int(u2 - u1) + 1)
    edges = np.linspace(u1, u2, n + 1)
    return math.fsum(integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=200)[0]
                     for lo, hi in zip(edges[:-1], edges[1:]))


def reg_bc_residual(spec: PropagatorSpec, p, zp, method="analytic", h=None):
    """Boundary residual of C_reg at z=0.

    ``method="fd"`` uses a one-sided Richardson difference of C_reg itself.
    """
    kind = spec.bc.kind
    if kind == DIRICHLET:
        return C_reg(spec, p, 0.0, zp)
    if method == "analytic":
        d = dz_C_reg_at_wall(spec, p, zp)
    else:
        if h is None:
            # the pieces vary on the scale min(1/Lam0, z'), truncation error is O(h^3)
            scale = 1.0 / spec.lambda_high
            if zp > 0:
                scale = min(scale, zp)
            h = 2e-3 * scale
        f = lambda z: C_reg(spec, p, z, zp)
        f0 = f(0.0)
        # second-order one-sided differences at h, h/2, Richardson combined
        d1 = (-3 * f0 + 4 * f(h) - f(2 * h)) / (2 * h)
        h2 = h / 2
        d2 = (-3 * f0 + 4 * f(h2) - f(2 * h2)) / (2 * h2)
        d = (4 * d2 - d1) / 3
    return d - spec.bc.c * C_reg(spec, p, 0.0, zp) if kind == ROBIN else d


def cdot_prefactor(Lam, m, p=0.0, order=0):
    """p-derivatives (order 0..2) of -(2/Lam^3) exp(-(p^2+m^2)/Lam^2)."""
    if not Lam > 0:
        raise hk.DomainError("Lambda must be > 0")
    p = np.asarray(p, float)
    base = -(2.0 / Lam ** 3) * np.exp(-(p * p + m * m) / Lam ** 2)
    if order == 0:
        return base
    if order == 1:
        return base * (-2 * p / Lam ** 2)
    if order == 2:
        return base * (4 * p * p / Lam ** 4 - 2 / Lam ** 2)
    raise hk.UnsupportedOrder("order must be 0, 1 or 2")


def Cdot(spec: PropagatorSpec, p, z, zp):
    Lam = spec.lambda_low
    if not Lam > 0:
        raise hk.DomainError("Cdot needs Lambda > 0")
    return cdot_prefactor(Lam, spec.m, p) * hk.p_robin(1.0 / Lam ** 2, z, zp, spec.bc.c)


def dLam_C_reg_fd(spec: PropagatorSpec, p, z, zp, rel_step=1e-3):
    """Richardson-extrapolated central difference of C_reg in Lambda."""
    Lam = spec.lambda_low
    h = rel_step * Lam

    def D(h):
        up = C_reg(spec.with_cutoffs(Lam + h, max(spec.lambda_high, Lam + h)), p, z, zp)
        dn = C_reg(spec.with_cutoffs(Lam - h, spec.lambda_high), p, z, zp)
        return (up - dn) / (2 * h)

    return (4 * D(h / 2) - D(h)) / 3


def removed_cutoff_limit(bc: BoundaryCondition, m, p, z, zp):
    """Lam -> 0, Lam0 -> inf limit of C_reg in closed form."""
    return 2 * C_pz(bc, math.sqrt(2.0) * m, math.sqrt(2.0) * np.asarray(p, float), z, zp)


def fitted_decay_rate(spec: PropagatorSpec, p, z0, separations):
    """Least-squares slope of -log C_reg(p; z0, z0 + d) against d."""
    d = np.asarray(separations, float)
    vals = np.array([C_reg(spec, p, z0, z0 + s) for s in d])
    A = np.vstack([d, np.ones_like(d)]).T
    slope, _ = np.linalg.lstsq(A, np.log(vals), rcond=None)[0]
    return -float(slope)


def dirichlet_gap(c, m=1.0, p=0.0, zs=None):
    """sup_z,z' |C_Robin(c) - C_Dirichlet| on a grid."""
    if zs is None:
        zs = np.linspace(0.0, 5.0 / m, 51)
    Z, Zp = np.meshgrid(zs, zs)
    rob = C_pz(BoundaryCondition.robin(c), m, p, Z, Zp)
    dir_ = C_pz(BoundaryCondition(DIRICHLET), m, p, Z, Zp)
    return float(np.max(np.abs(rob - dir_)))


def loglog_slope(x, y):
    A = np.vstack([np.log(x), np.ones(len(x))]).T
    return float(np.linalg.lstsq(A, np.log(y), rcond=None)[0][0])
