"""Test functions built from Robin heat kernels, and folding of kernels against them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import heatkernel as hk
from .kernels import NPointKernel

TAU_FLOOR = 1e-6  # in units of m^-2


@dataclass(frozen=True)
class TestFunctionSpec:
    n: int
    s: int
    taus: tuple = ()
    anchors: tuple = ()
    c: float = 0.0
    variant: tuple = ("plain",)
    m: float = 1.0

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        object.__setattr__(self, "anchors", tuple(float(y) for y in self.anchors))
        if self.n < 2 or not 1 <= self.s <= self.n:
            raise ValueError("need n >= 2 and 1 <= s <= n")
        if len(self.taus) != self.s - 1 or len(self.anchors) != self.s - 1:
            raise ValueError("taus and anchors need s-1 entries (legs 2..s)")
        if self.s > 1 and min(self.taus) < TAU_FLOOR / self.m ** 2:
            raise ValueError("tau below the resolvable floor")
        if any(y < 0 for y in self.anchors):
            raise hk.DomainError("anchors must be >= 0")
        if self.variant[0] == "diff":
            j = self.variant[1]
            if not 2 <= j <= self.s:
                raise hk.DomainError("Diff(j) needs 2 <= j <= s")
        elif self.variant[0] != "plain":
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def plain(cls, n, taus=(), anchors=(), c=0.0, **kw):
        return cls(n, len(taus) + 1, tuple(taus), tuple(anchors), c, ("plain",), **kw)

    def diff(self, j):
        return TestFunctionSpec(self.n, self.s, self.taus, self.anchors, self.c, ("diff", j), self.m)

    def as_plain(self):
        return TestFunctionSpec(self.n, self.s, self.taus, self.anchors, self.c, ("plain",), self.m)

    @property
    def tau_min(self):
        return min(self.taus) if self.taus else math.inf

    def leg_factor(self, leg, x, z1=None):
        """Factor carried by leg (2..n) at coordinate x."""
        x = np.asarray(x, float)
        if leg > self.s:
            return np.where(x >= 0, 1.0, 0.0)
        tau, y = self.taus[leg - 2], self.anchors[leg - 2]
        val = hk.p_robin(tau, x, y, self.c)
        if self.variant[0] == "diff" and self.variant[1] == leg:
            if z1 is None:
                raise ValueError("Diff variant needs z1")
            val = val - hk.p_robin(tau, np.broadcast_to(z1, x.shape), y, self.c)
        return val


def eval_testfn(spec: TestFunctionSpec, z, z1=None):
    """Value at z = (z2, ..., zn)."""
    z = np.asarray(z, float)
    if z.shape[-1] != spec.n - 1:
        raise ValueError("need n-1 coordinates")
    if np.any(z < 0):
        raise hk.DomainError("coordinates must be >= 0")
    out = np.ones(z.shape[:-1])
    for leg in range(2, spec.n + 1):
        out = out * spec.leg_factor(leg, z[..., leg - 2], z1)
    return out


def telescoped_pieces(spec: TestFunctionSpec, z, z1):
    """Phi(z) = Phi(z1,...,z1) + sum_j psi_j(z).

    psi_j puts legs before j at z1, leg j in the difference form and legs after
    j at their own coordinates, so the sum telescopes exactly.
    """
    plain = spec.as_plain()
    z = np.asarray(z, float)
    base = 1.0
    for leg in range(2, spec.s + 1):
        base *= float(plain.leg_factor(leg, z1))
    pieces = []
    for j in range(2, spec.s + 1):
        d = spec.diff(j)
        val = 1.0
        for leg in range(2, spec.s + 1):
            if leg < j:
                val *= float(plain.leg_factor(leg, z1))
            elif leg == j:
                val *= float(d.leg_factor(leg, z[leg - 2], z1))
            else:
                val *= float(plain.leg_factor(leg, z[leg - 2]))
        pieces.append(val)
    return base, pieces


def boundary_weight(cluster_size, z1):
    """Strong Dirac convention: each delta collapsing onto z1 = 0 weighs 1/2."""
    z1 = np.asarray(z1, float)
    return np.where(z1 == 0.0, 0.5 ** (cluster_size - 1), 1.0)


def _term_fold(term, kernel, spec, r, i):
    z1 = kernel.z1
    c1 = term.clusters[0]
    f1 = boundary_weight(len(c1), z1)
    for leg in c1:
        if leg != 1:
            f1 = f1 * spec.leg_factor(leg, z1, z1)
    if len(term.clusters) == 1:
        if r > 0:
            return np.zeros_like(z1)
        return term.values * f1
    if r > 0 and i in c1:
        return np.zeros_like(z1)
    pr = kernel.pairs
    u = pr.u
    z1b = z1[:, None]
    f2 = np.ones_like(u)
    for leg in term.clusters[1]:
        f2 = f2 * spec.leg_factor(leg, u, np.broadcast_to(z1b, u.shape))
    if r > 0:
        f2 = f2 * (z1b - u) ** r
    return f1 * np.sum(pr.w * term.values * f2, axis=1)


def fold(kernel: NPointKernel, spec: TestFunctionSpec, r=0, i=None, slot="p0"):
    """z1 -> int dz_2..dz_n (z1 - z_i)^r L(z1, ..., z_n) Phi(z_2..z_n), on kernel.z1."""
    if kernel.n != spec.n:
        raise ValueError(f"kernel has {kernel.n} legs, test function {spec.n}")
    if r > 0 and not (i is not None and 2 <= i <= kernel.n):
        raise ValueError("moment leg must lie in 2..n")
    if r > 3:
        raise ValueError("moment power must be 0..3")
    out = np.zeros_like(kernel.z1, dtype=float)
    for term in kernel.terms:
        if term.momentum_slot == slot:
            out = out + _term_fold(term, kernel, spec, r, i)
    return out


def fold_F12(kernel: NPointKernel, spec: TestFunctionSpec, slot="p0"):
    """(z1, z2) -> (z1 - z2)^3 int dz_3..dz_n L Phi on the kernel's pair rule.

    Returns an array shaped like ``kernel.pairs.u`` whose column u is z2.
    Terms that put leg 2 in the cluster of leg 1 contribute zero.
    """
    if kernel.n != spec.n:
        raise ValueError(f"kernel has {kernel.n} legs, test function {spec.n}")
    if kernel.pairs is None:
        shape = (kernel.z1.size, 1)
        return np.zeros(shape)
    u = kernel.pairs.u
    z1b = kernel.z1[:, None]
    out = np.zeros_like(u)
    for term in kernel.terms:
        if term.momentum_slot != slot or len(term.clusters) == 1 or 2 in term.clusters[0]:
            continue
        c1, c2 = term.clusters
        f = np.broadcast_to(boundary_weight(len(c1), kernel.z1)[:, None], u.shape).copy()
        for leg in c1:
            if leg != 1:
                f = f * spec.leg_factor(leg, z1b, z1b)
        for leg in c2:
            if leg != 2:
                f = f * spec.leg_factor(leg, u, np.broadcast_to(z1b, u.shape))
        out = out + (z1b - u) ** 3 * term.values * f
    return out


def derivative_envelope_constant(tau, y, c, alpha, delta=0.25, zs=None):
    """max over z of tau^{alpha/2} |d^alpha p_R(tau; z, y)| / p_B((1+delta) tau; z, y)."""
    if zs is None:
        zs = np.linspace(0.0, y + 12 * math.sqrt(tau), 4001)
    num = np.abs(hk.dz_p_robin(alpha, tau, zs, y, c)) * tau ** (alpha / 2)
    den = hk.p_bulk((1 + delta) * tau, zs, y)
    ok = den > 0
    return float(np.max(num[ok] / den[ok]))
