"""Grids and the delta-cluster representation of n-point kernels.

A kernel term is a partition of the legs into clusters.  Every cluster is
collapsed onto one coordinate by products of delta functions.  The cluster
holding leg 1 sits at z1.  With two clusters, the second sits at a companion
coordinate u, and the smooth part is stored on a per-row quadrature rule in u
that is graded towards u = z1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridHalfLine:
    nodes: np.ndarray
    weights: np.ndarray
    zmax: float

    @classmethod
    def geometric(cls, n=96, ratio=1.08, zmax=12.0):
        k = np.arange(n)
        if ratio == 1.0:
            nodes = zmax * k / (n - 1)
        else:
            nodes = zmax * np.expm1(k * math.log(ratio)) / math.expm1((n - 1) * math.log(ratio))
        nodes[0], nodes[-1] = 0.0, zmax
        return cls.from_nodes(nodes)

    @classmethod
    def from_nodes(cls, nodes):
        nodes = np.asarray(nodes, float)
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must start at 0 and increase strictly")
        h = np.diff(nodes)
        w = np.zeros_like(nodes)
        w[:-1] += h / 2
        w[1:] += h / 2
        return cls(nodes, w, float(nodes[-1]))

    def __len__(self):
        return self.nodes.size

    def grading(self):
        h = np.diff(self.nodes)
        return float(h[-1] / h[0])


def _gl(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return x, w


def companion_rule(z1, umax, h_min, ratio=1.25, h_max=0.5, q=6):
    """Nodes and weights for int_0^umax du f(u) with f sharply peaked at u=z1."""
    x, w = _gl(q)

    def side(length):
        edges = [0.0]
        h = h_min
        while edges[-1] < length:
            edges.append(min(length, edges[-1] + h))
            h = min(h * ratio, h_max)
        # avoid a sliver at the end
        if len(edges) > 2 and edges[-1] - edges[-2] < 0.3 * (edges[-2] - edges[-3]):
            edges.pop(-2)
        return np.array(edges)

    parts_u, parts_w = [], []
    for sign, length in ((-1.0, z1), (1.0, umax - z1)):
        if length <= 0:
            continue
        e = side(length)
        a, b = e[:-1], e[1:]
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        d = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        parts_u.append(z1 + sign * d)
        parts_w.append((half[:, None] * w[None, :]).ravel())
    u = np.concatenate(parts_u)
    wu = np.concatenate(parts_w)
    order = np.argsort(u, kind="stable")
    return u[order], wu[order]


@dataclass
class PairRule:
    """Companion u-rules for a set of z1 rows, padded to equal length."""
    z1: np.ndarray
    u: np.ndarray
    w: np.ndarray

    @classmethod
    def build(cls, z1, umax, h_min, **kw):
        rules = [companion_rule(float(z), umax, h_min, **kw) for z in z1]
        width = max(r[0].size for r in rules)
        u = np.zeros((len(rules), width))
        w = np.zeros((len(rules), width))
        for i, (ui, wi) in enumerate(rules):
            u[i, :ui.size] = ui
            u[i, ui.size:] = ui[-1]
            w[i, :wi.size] = wi
        return cls(np.asarray(z1, float), u, w)

    @property
    def shape(self):
        return self.u.shape


@dataclass
class KernelTerm:
    clusters: tuple            # tuple of tuples of 1-based leg indices
    values: np.ndarray         # (nz1,) for one cluster, (nz1, nu) for two
    momentum_slot: str = "p0"  # "p0" or "dp2"
    label: str = ""

    def __post_init__(self):
        legs = sorted(i for c in self.clusters for i in c)
        if legs != list(range(1, len(legs) + 1)):
            raise ValueError("clusters must partition the legs 1..n")
        if 1 not in self.clusters[0]:
            raise ValueError("the first cluster must hold leg 1")
        if len(self.clusters) > 2:
            raise NotImplementedError("at most two clusters at one loop")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite smooth part")

    @property
    def n(self):
        return sum(len(c) for c in self.clusters)

    @property
    def key(self):
        return (tuple(tuple(sorted(c)) for c in self.clusters), self.momentum_slot, self.label)


@dataclass
class NPointKernel:
    l: int
    n: int
    z1: np.ndarray
    terms: list = field(default_factory=list)
    pairs: PairRule | None = None

    def add(self, term: KernelTerm):
        if term.n != self.n:
            raise ValueError(f"term has {term.n} legs, kernel has {self.n}")
        for t in self.terms:
            if t.key == term.key:
                t.values = t.values + term.values
                return self
        self.terms.append(term)
        return self

    def slot(self, name):
        return [t for t in self.terms if t.momentum_slot == name]

    def scaled(self, factor):
        out = NPointKernel(self.l, self.n, self.z1, [], self.pairs)
        for t in self.terms:
            out.terms.append(KernelTerm(t.clusters, factor * t.values, t.momentum_slot, t.label))
        return out
