"""Gaussian samples of a single transverse-momentum mode with covariance C_reg.

Used as a positivity and covariance cross-check on the propagator stack.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import heatkernel as hk
from . import propagator as pg
from .kernels import GridHalfLine

CLIP_REL = 1e-10
BLOCK = 8192


class PositivityError(RuntimeError):
    pass


@dataclass
class CovarianceMatrix:
    nodes: np.ndarray
    weights: np.ndarray
    p: float
    spec: pg.PropagatorSpec
    raw: np.ndarray        # C_reg(p; z_i, z_j)
    entries: np.ndarray    # sqrt(w_i) C_ij sqrt(w_j), the operator on the grid
    eig_min: float
    eig_max: float

    @property
    def eigen_floor(self):
        """Smallest eigenvalue relative to the largest."""
        return self.eig_min / self.eig_max if self.eig_max > 0 else 0.0

    def report(self):
        return {"n": int(self.nodes.size), "p": self.p, "eig_min": self.eig_min,
                "eig_max": self.eig_max, "eigen_floor": self.eigen_floor}


def build_covariance(spec: pg.PropagatorSpec, grid, p=0.0, weights=None):
    """Dense C_reg on the grid nodes plus its eigenvalue range.

    ``grid`` is a GridHalfLine or a plain coordinate array (repeated points allowed,
    weights default to 1).
    """
    if not spec.lambda_low > 0:
        raise hk.DomainError("sampling needs Lam > 0")
    if isinstance(grid, GridHalfLine):
        nodes, w = grid.nodes, grid.weights
    else:
        nodes = np.asarray(grid, float)
        w = np.ones_like(nodes) if weights is None else np.asarray(weights, float)
    raw = pg.C_reg_matrix(spec, p, nodes)
    sw = np.sqrt(w)
    ent = sw[:, None] * raw * sw[None, :]
    ev = np.linalg.eigvalsh(ent)
    cov = CovarianceMatrix(nodes, w, float(p), spec, raw, ent, float(ev[0]), float(ev[-1]))
    if cov.eig_min < -CLIP_REL * cov.eig_max:
        raise PositivityError(f"eigenvalue {cov.eig_min:.3e} below -{CLIP_REL}*lambda_max")
    return cov


def _sqrt_factor(C):
    ev, V = np.linalg.eigh(C)
    top = ev[-1] if ev.size else 0.0
    if ev.size and ev[0] < -CLIP_REL * max(top, 0.0):
        raise PositivityError(f"eigenvalue {ev[0]:.3e} below the clipping floor")
    return V * np.sqrt(np.clip(ev, 0.0, None))[None, :]


def block_rng(seed, block):
    """Counter-based generator for one sample block."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def sample_gaussian(C, count, seed, block=BLOCK, workers=1):
    """count zero-mean draws with covariance C, one row per draw."""
    C = np.asarray(C, float)
    n = C.shape[0]
    if count == 0:
        return np.zeros((0, n))
    F = _sqrt_factor(C)
    sizes = [min(block, count - b * block) for b in range(math.ceil(count / block))]

    def run(b):
        xi = block_rng(seed, b).standard_normal((sizes[b], n))
        return xi @ F.T

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    return np.concatenate(parts, axis=0)


def sample_fields(cov: CovarianceMatrix, count, rng_seed, block=BLOCK, workers=1):
    """Field values at the grid nodes, shape (count, n)."""
    return sample_gaussian(cov.raw, count, rng_seed, block, workers)


def _ratio(a, b):
    """a / b with 0/0 read as 0 (a pinned node, e.g. the Dirichlet wall)."""
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def empirical_checks(samples, C, mean_sigmas=4.0, cov_sigmas=3.0):
    """Mean and covariance agreement of zero-mean samples with the target C."""
    N = samples.shape[0]
    d = np.diag(C)
    mean = samples.mean(axis=0)
    mean_ok = np.abs(mean) <= mean_sigmas * np.sqrt(d / N)
    S = samples.T @ samples / N
    se = np.sqrt((C ** 2 + np.outer(d, d)) / N)
    within = np.abs(S - C) <= cov_sigmas * se
    iu = np.triu_indices_from(C)
    return {
        "count": N,
        "mean_all_within": bool(np.all(mean_ok)),
        "mean_max_sigma": float(np.max(_ratio(np.abs(mean), np.sqrt(d / N)))),
        "cov_fraction_within": float(np.mean(within[iu])),
        "cov_max_sigma": float(np.max(_ratio(np.abs(S - C)[iu], se[iu]))),
    }


def _wall_rule(spec):
    t1, t2 = spec.lam_range
    return pg.loglam_rule(t1, t2, per_decade=8, order=16)


def augmented_covariance(spec: pg.PropagatorSpec, p, nodes):
    """Joint covariance of (phi(z_j) for the nodes, d_z phi(0)).

    All entries share one lam-rule so the Robin relation is tested pointwise:
    the derivative row uses the analytic z-derivative of p_R and the
    derivative variance uses d_z d_z' p_R = d_z^2 p_R - 2 d_z^2 p_B at (0, 0).
    """
    nodes = np.asarray(nodes, float)
    lam, w = _wall_rule(spec)
    M2 = p * p + spec.m ** 2
    wt = w * np.exp(-lam * M2)
    c = spec.bc.c
    L = lam[:, None, None]
    C = np.einsum("k,kij->ij", wt, hk.p_robin(L, nodes[None, :, None], nodes[None, None, :], c))
    D = wt @ hk.dz_p_robin(1, lam[:, None], 0.0, nodes[None, :], c)
    DD = float(wt @ (hk.dz_p_robin(2, lam, 0.0, 0.0, c) - 2 * hk.dz_p_bulk(2, lam, 0.0, 0.0)))
    n = nodes.size
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = 0.5 * (C + C.T)
    out[:n, n] = out[n, :n] = D
    out[n, n] = DD
    return out


def robin_regression(spec: pg.PropagatorSpec, p=0.0, count=20000, seed=0, nodes=(0.0, 0.1, 0.5)):
    """Regress sampled d_z phi(0) on phi(0); the slope should be the Robin constant."""
    if math.isinf(spec.bc.c):
        raise hk.DomainError("no finite slope for Dirichlet")
    nodes = np.asarray(nodes, float)
    if nodes[0] != 0.0:
        raise ValueError("first node must be the wall")
    C = augmented_covariance(spec, p, nodes)
    X = sample_gaussian(C, count, seed)
    x, y = X[:, 0], X[:, -1]
    sxx = float(x @ x)
    slope = float(x @ y) / sxx
    resid = y - slope * x
    se = math.sqrt(float(resid @ resid) / (count - 1) / sxx)
    return {"c": spec.bc.c, "slope": slope, "se": se, "count": count, "seed": seed}
