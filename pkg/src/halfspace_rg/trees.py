"""Rooted trees that index the heat-kernel envelopes, and their weight factors.

A single-rooted tree has the root z1, labelled external vertices y2..ys
(incidence 1) and unlabelled internal vertices of incidence >= 2.  A twice
rooted tree additionally carries the fixed vertex z2, which may have
any incidence; its externals are then y3..ys.  Internally z2 carries the
label 0.

Admissibility for class (s, l), l >= 1:  v2 + [c1 == 1] <= 3l - 2 + s/2 for
single-rooted trees and <= 3l - 2 + (s-1)/2 for twice-rooted ones, where v2
counts internal vertices of incidence 2 (roots excluded).  At l = 0 the only
condition is v2 = 0.

Enumeration works on label sets: every subtree hanging below a vertex holds at
least one label, so sibling subtrees are told apart by their label sets and a
canonical form needs no isomorphism search.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import optimize, signal

from . import heatkernel as hk

SINGLE, TWICE = "single", "twice"
Z2 = 0  # label of the second root z2 in twice-rooted trees


class EnumerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# nested structures: ("leaf", i) | ("int", kids) | ("z2", kids) | ("root", kids)

def canonical(node):
    kind = node[0]
    if kind == "leaf":
        return f"y{node[1]}"
    inner = ",".join(sorted(canonical(k) for k in node[1]))
    if kind == "int":
        return f"({inner})"
    if kind == "z2":
        return f"Z({inner})" if node[1] else "Z"
    return f"R({inner})"


def _set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


@lru_cache(maxsize=None)
def _subtrees(labels: frozenset, cap: int):
    """All subtrees whose label set is ``labels`` with at most ``cap`` incidence-2 internals.

    Returns a tuple of (node, v2, n_internal).
    """
    out = []
    if len(labels) == 1:
        (lab,) = labels
        if lab == Z2:
            out.append((("z2", ()), 0, 0))
        else:
            out.append((("leaf", lab), 0, 0))
    if Z2 in labels and len(labels) > 1:
        rest = labels - {Z2}
        for part in _set_partitions(sorted(rest)):
            for kids, v2, ni in _combine(part, cap):
                out.append((("z2", kids), v2, ni))
    for part in _set_partitions(sorted(labels)):
        unary = 1 if len(part) == 1 else 0
        if unary > cap:
            continue
        for kids, v2, ni in _combine(part, cap - unary):
            out.append((("int", kids), v2 + unary, ni + 1))
    return tuple(out)


def _combine(blocks, cap):
    options = [_subtrees(frozenset(b), cap) for b in blocks]
    for combo in itertools.product(*options):
        v2 = sum(c[1] for c in combo)
        if v2 <= cap:
            yield tuple(c[0] for c in combo), v2, sum(c[2] for c in combo)


def _labels(s, kind):
    return [Z2] + list(range(3, s + 1)) if kind == TWICE else list(range(2, s + 1))


def admissibility_bound(s, l, kind=SINGLE):
    if kind == TWICE:
        return Fraction(3 * l - 2) + Fraction(s - 1, 2)
    return Fraction(3 * l - 2) + Fraction(s, 2)


def is_admissible(v2, c1, s, l, kind=SINGLE):
    if l == 0:
        return v2 == 0
    return v2 + (1 if c1 == 1 else 0) <= admissibility_bound(s, l, kind)


# ---------------------------------------------------------------------------

@dataclass
class Tree:
    kind: str
    parent: list                 # parent[v], -1 for the root (vertex 0)
    label: dict                  # vertex -> external label i (y_i), or Z2 for z2
    canon: str = ""
    s: int = 0

    @property
    def root(self):
        return 0

    @property
    def n_vertices(self):
        return len(self.parent)

    @property
    def edges(self):
        return [(p, v) for v, p in enumerate(self.parent) if p >= 0]

    @property
    def children(self):
        ch = [[] for _ in self.parent]
        for v, p in enumerate(self.parent):
            if p >= 0:
                ch[p].append(v)
        return ch

    @property
    def incidence(self):
        inc = [0] * self.n_vertices
        for a, b in self.edges:
            inc[a] += 1
            inc[b] += 1
        return inc

    @property
    def externals(self):
        return sorted((v for v, lab in self.label.items() if lab != Z2), key=lambda v: self.label[v])

    @property
    def z2_vertex(self):
        for v, lab in self.label.items():
            if lab == Z2:
                return v
        return None

    @property
    def internals(self):
        return [v for v in range(1, self.n_vertices) if v not in self.label]

    @property
    def v2(self):
        inc = self.incidence
        return sum(1 for v in self.internals if inc[v] == 2)

    @property
    def c1(self):
        return self.incidence[0]

    def is_external_line(self, a, b):
        return (a in self.label and self.label[a] != Z2) or (b in self.label and self.label[b] != Z2)

    def internal_lines(self):
        return [e for e in self.edges if not self.is_external_line(*e)]

    def external_lines(self):
        return [e for e in self.edges if self.is_external_line(*e)]

    def validate(self):
        inc = self.incidence
        for v in self.internals:
            if inc[v] < 2:
                raise ValueError("internal vertex with incidence < 2")
        for v, lab in self.label.items():
            if lab != Z2 and inc[v] != 1:
                raise ValueError("external vertex with incidence != 1")
        return True

    def __str__(self):
        return self.canon


def tree_from_nested(node, kind=SINGLE, s=None):
    parent, label = [], {}

    def walk(nd, par):
        v = len(parent)
        parent.append(par)
        if nd[0] == "leaf":
            label[v] = nd[1]
            return
        if nd[0] == "z2":
            label[v] = Z2
        for k in nd[1]:
            walk(k, v)

    walk(node, -1)
    t = Tree(kind, parent, label, canonical(node))
    t.s = s if s is not None else (len(label) + 1)
    return t


def empty_tree(kind=SINGLE):
    return Tree(kind, [-1], {}, "R()", 1)


def enumerate_trees(s, l, max_internal=None, kind=SINGLE):
    """All admissible trees of class (s, l), canonical order (size, string)."""
    if s < 1 or l < 0:
        raise ValueError("need s >= 1, l >= 0")
    if kind == TWICE and s < 2:
        raise ValueError("twice-rooted trees need s >= 2")
    if s == 1:
        return [empty_tree()]
    labels = frozenset(_labels(s, kind))
    bound = admissibility_bound(s, l, kind)
    v2max = 0 if l == 0 else math.floor(bound)
    if v2max < 0:
        return []
    derived = v2max + max(s - 2, 0)
    out = []
    for part in _set_partitions(sorted(labels)):
        c1 = len(part)
        cap = 0 if l == 0 else math.floor(bound - (1 if c1 == 1 else 0))
        if cap < 0:
            continue
        for kids, v2, ni in _combine(part, cap):
            if not is_admissible(v2, c1, s, l, kind):
                continue
            if max_internal is not None and ni > max_internal:
                raise EnumerationError(
                    f"tree with {ni} internal vertices exceeds cap {max_internal}; "
                    f"the class needs up to v2max + s - 2 = {derived}")
            if ni > derived:
                raise EnumerationError(f"internal count {ni} above derived cap {derived}")
            out.append(tree_from_nested(("root", kids), kind, s))
    out.sort(key=lambda t: (t.n_vertices, t.canon))
    return out


# ---------------------------------------------------------------------------
# brute force over unlabelled free trees (test oracle; needs networkx)

def brute_force_trees(s, l, kind=SINGLE):
    """Canonical strings of admissible trees, from networkx free-tree generation.

    Every unlabelled free tree of each size is tried with every root and every
    assignment of labels to its leaves; survivors are deduplicated by labelled
    rooted isomorphism (WL hash buckets, then an exact isomorphism test).
    """
    import networkx as nx

    if s == 1:
        return {"R()"}
    labs = _labels(s, kind)
    bound = admissibility_bound(s, l, kind)
    v2max = 0 if l == 0 else math.floor(bound)
    max_int = v2max + max(s - 2, 0)
    buckets = {}
    match = lambda a, b: a["tag"] == b["tag"]
    for N in range(1 + len(labs), 2 + len(labs) + max_int):
        gens = [nx.path_graph(2)] if N == 2 else nx.nonisomorphic_trees(N)
        for g in gens:
            deg = dict(g.degree)
            for root in g.nodes:
                leaves = [v for v in g.nodes if v != root and deg[v] == 1]
                # externals must be exactly the non-root leaves; z2 may also sit inside
                if kind == SINGLE and len(leaves) != len(labs):
                    continue
                if kind == TWICE and len(leaves) not in (len(labs) - 1, len(labs)):
                    continue
                pool = leaves if len(leaves) == len(labs) else \
                    leaves + [v for v in g.nodes if v != root and deg[v] > 1]
                for chosen in itertools.permutations(pool, len(labs)):
                    lab = dict(zip(chosen, labs))
                    if any(deg[v] == 1 and v not in lab for v in g.nodes if v != root):
                        continue
                    if any(lab.get(v, Z2) != Z2 and deg[v] != 1 for v in g.nodes):
                        continue
                    v2 = sum(1 for v in g.nodes if v != root and v not in lab and deg[v] == 2)
                    if not is_admissible(v2, deg[root], s, l, kind):
                        continue
                    h = g.copy()
                    nx.set_node_attributes(
                        h, {v: ("R" if v == root else str(lab.get(v, ""))) for v in h}, "tag")
                    key = nx.weisfeiler_lehman_graph_hash(h, node_attr="tag", iterations=6)
                    reps = buckets.setdefault(key, [])
                    if not any(nx.is_isomorphic(h, r, node_match=match) for r in reps):
                        reps.append(h)
    return {_string_of(h) for reps in buckets.values() for h in reps}


def _string_of(h):
    """Canonical string computed directly from a tagged networkx tree."""
    root = next(v for v, d in h.nodes(data=True) if d["tag"] == "R")

    def rec(v, par):
        kids = [rec(w, v) for w in h.neighbors(v) if w != par]
        tag = h.nodes[v]["tag"]
        if v == root:
            return "R(" + ",".join(sorted(kids)) + ")"
        if tag == str(Z2):
            return "Z(" + ",".join(sorted(kids)) + ")" if kids else "Z"
        if tag != "":
            return f"y{tag}"
        return "(" + ",".join(sorted(kids)) + ")"

    return rec(root, None)


# ---------------------------------------------------------------------------
# reduction

@dataclass
class Reduction:
    tree: Tree
    empty: bool
    removed_internals: int
    v2_before: int
    v2_after: int
    c1_after: int


def reduce_tree(tree: Tree, ext_i: int, ext_j: int) -> Reduction:
    """Remove externals y_i, y_j and cascade away internals left with incidence 1."""
    labels = {lab: v for v, lab in tree.label.items()}
    if ext_i == ext_j or ext_i not in labels or ext_j not in labels or Z2 in (ext_i, ext_j):
        raise ValueError("both arguments must be distinct external labels")
    adj = {v: set() for v in range(tree.n_vertices)}
    for a, b in tree.edges:
        adj[a].add(b)
        adj[b].add(a)
    alive = set(range(tree.n_vertices))
    for lab in (ext_i, ext_j):
        v = labels[lab]
        for w in adj[v]:
            adj[w].discard(v)
        adj[v].clear()
        alive.discard(v)
    removed = 0
    internals = set(tree.internals)
    changed = True
    while changed:
        changed = False
        for v in sorted(alive & internals):
            if len(adj[v]) == 1:
                (w,) = adj[v]
                adj[w].discard(v)
                adj[v].clear()
                alive.discard(v)
                removed += 1
                changed = True
            elif len(adj[v]) == 0:
                alive.discard(v)
                removed += 1
                changed = True

    def nest(v, par):
        kids = tuple(nest(w, v) for w in sorted(adj[v]) if w != par)
        if v == 0:
            return ("root", kids)
        lab = tree.label.get(v)
        if lab == Z2:
            return ("z2", kids)
        if lab is not None:
            return ("leaf", lab)
        return ("int", kids)

    node = nest(0, None)
    if not node[1]:
        red = empty_tree(tree.kind)
    else:
        red = tree_from_nested(node, tree.kind, tree.s - 2)
        red = relabel_compact(red)
    return Reduction(red, not node[1], removed, tree.v2, red.v2 if node[1] else 0, red.c1)


def relabel_compact(tree: Tree) -> Tree:
    """Renumber external labels to 2..s (3..s for twice-rooted) preserving order."""
    start = 3 if tree.kind == TWICE else 2
    ext = sorted(lab for lab in tree.label.values() if lab != Z2)
    mapping = {old: start + k for k, old in enumerate(ext)}
    new_label = {v: (Z2 if lab == Z2 else mapping[lab]) for v, lab in tree.label.items()}
    t = Tree(tree.kind, list(tree.parent), new_label)
    t.canon = _canon_tree(t)
    t.s = len(ext) + (2 if tree.kind == TWICE else 1)
    return t


def _canon_tree(t: Tree):
    ch = t.children

    def rec(v):
        kids = sorted(rec(w) for w in ch[v])
        if v == 0:
            return "R(" + ",".join(kids) + ")"
        lab = t.label.get(v)
        if lab == Z2:
            return "Z(" + ",".join(kids) + ")" if kids else "Z"
        if lab is not None:
            return f"y{lab}"
        return "(" + ",".join(kids) + ")"

    return rec(0)


# ---------------------------------------------------------------------------
# weight factors

def line_variance(Lam_I, delta):
    return (1 + delta) / Lam_I ** 2


def weight_factor(tree: Tree, scales: dict, taus: dict, positions: dict, delta=0.25):
    """Product of bulk heat kernels over the lines of the tree.

    ``scales`` maps internal lines (parent, child) to Lam_I; ``taus`` maps
    external labels i to tau_i; ``positions`` maps every vertex to a point.
    """
    if set(positions) != set(range(tree.n_vertices)):
        raise ValueError("positions must cover every vertex")
    val = 1.0
    for a, b in tree.edges:
        if tree.is_external_line(a, b):
            ext = b if b in tree.label and tree.label[b] != Z2 else a
            tau = taus.get(tree.label[ext])
            if tau is None:
                raise ValueError(f"no width for external y{tree.label[ext]}")
            var = (1 + delta) * tau
        else:
            if (a, b) not in scales:
                raise ValueError(f"no scale for internal line {(a, b)}")
            var = line_variance(scales[(a, b)], delta)
        val *= float(hk.p_bulk(var, positions[a], positions[b]))
    return val


def _gregory_weights(n, h):
    w = np.full(n, h)
    corr = np.array([3 / 8, 7 / 6, 23 / 24])
    k = min(3, n)
    w[:k] = corr[:k] * h
    w[-k:] = corr[:k][::-1] * h
    return w


@dataclass
class _Layout:
    x: np.ndarray
    w: np.ndarray
    h: float


def _layout(points, variances, halfline=True):
    sig = np.sqrt(np.asarray(variances, float))
    h = float(sig.min()) / 4
    pts = np.asarray(points, float)
    reach = 10.0 * float(sig.max()) * math.sqrt(len(variances) + 1)
    lo = 0.0 if halfline else float(pts.min()) - reach
    hi = float(pts.max()) + reach
    n = int(math.ceil((hi - lo) / h)) + 1
    x = lo + h * np.arange(n)
    return _Layout(x, _gregory_weights(n, h), h)


def integrate_internal(tree: Tree, scales: dict, taus: dict, anchors: dict, z1, z2=None,
                       delta=0.25, halfline=True):
    """Integral of the weight factor over internal vertex positions.

    Leaf-to-root elimination: each internal vertex is a grid function, each
    internal line a Gaussian convolution.
    """
    if tree.n_vertices == 1:
        return 1.0
    ch = tree.children
    var = {}
    for a, b in tree.edges:
        if tree.is_external_line(a, b):
            ext = b if b in tree.label and tree.label[b] != Z2 else a
            var[(a, b)] = (1 + delta) * taus[tree.label[ext]]
        else:
            var[(a, b)] = line_variance(scales[(a, b)], delta)
    fixed = [z1] + list(anchors.values()) + ([z2] if z2 is not None else [])
    lay = _layout(fixed, list(var.values()), halfline)
    x, w = lay.x, lay.w
    zv = tree.z2_vertex

    def msg_at_grid(v):
        """Product of child contributions at vertex v, as a function on the grid."""
        out = np.ones_like(x)
        for c in ch[v]:
            out = out * contribution(v, c, None)
        return out

    def msg_at_point(v, pt):
        out = 1.0
        for c in ch[v]:
            out *= float(contribution(v, c, pt))
        return out

    def contribution(v, c, pt):
        s2 = var[(v, c)]
        lab = tree.label.get(c)
        at = x if pt is None else pt
        if lab is not None and lab != Z2:
            return hk.p_bulk(s2, at, anchors[lab])
        if c == zv:
            return hk.p_bulk(s2, at, z2) * msg_at_point(c, z2)
        inner = w * msg_at_grid(c)
        if pt is not None:
            return float(hk.p_bulk(s2, pt, x) @ inner)
        kern = hk.p_bulk(s2, lay.h * np.arange(-(x.size - 1), x.size), 0.0)
        return signal.fftconvolve(kern, inner, mode="full")[x.size - 1:2 * x.size - 1]

    return msg_at_point(0, z1)


def _candidates(Lam, Lam0, m, k=8):
    lo = max(Lam, 0.05 * m)
    hi = min(Lam0, 1e3 * max(Lam, m))
    if hi <= lo:
        return np.array([lo])
    return np.exp(np.linspace(math.log(lo), math.log(hi), k))


def integrated_weight(Lam, Lam0, taus, tree: Tree, z1, anchors, z2=None, m=1.0,
                      delta=0.25, refine=True, return_scales=False):
    """sup over internal scales in [Lam, Lam0] of the integrated weight factor."""
    if Lam > Lam0:
        raise ValueError("need Lam <= Lam0")
    taus = dict(taus)
    anchors = dict(anchors)
    lines = tree.internal_lines()
    if not lines:
        val = integrate_internal(tree, {}, taus, anchors, z1, z2, delta)
        return (val, {}) if return_scales else val
    cand = _candidates(Lam, Lam0, m)
    lo_b = max(Lam, 0.05 * m)
    hi_b = min(Lam0, 1e3 * max(Lam, m))

    def F(logs):
        sc = {ln: math.exp(v) for ln, v in zip(lines, logs)}
        return integrate_internal(tree, sc, taus, anchors, z1, z2, delta)

    k = len(lines)
    logc = np.log(cand)
    best, best_x = -1.0, None
    if len(cand) ** k <= 512:
        for combo in itertools.product(range(len(cand)), repeat=k):
            v = F(logc[list(combo)])
            if v > best:
                best, best_x = v, logc[list(combo)].copy()
    else:
        cur = np.full(k, logc[0])
        best = F(cur)
        for _ in range(3):
            improved = False
            for i in range(k):
                for c in logc:
                    trial = cur.copy()
                    trial[i] = c
                    v = F(trial)
                    if v > best * (1 + 1e-12):
                        best, cur, improved = v, trial, True
            if not improved:
                break
        best_x = cur
    if refine and hi_b > lo_b:
        step = (logc[1] - logc[0]) if len(logc) > 1 else 0.0
        for i in range(k):
            a = max(math.log(lo_b), best_x[i] - step)
            b = min(math.log(hi_b), best_x[i] + step)
            if b <= a:
                continue

            def negf(t, i=i):
                trial = best_x.copy()
                trial[i] = t
                return -F(trial)

            res = optimize.minimize_scalar(negf, bounds=(a, b), method="bounded",
                                           options={"xatol": 1e-3})
            if -res.fun > best:
                best = -res.fun
                best_x[i] = res.x
    if return_scales:
        return best, {ln: math.exp(v) for ln, v in zip(lines, best_x)}
    return best


def global_weight(Lam, Lam0, taus, s, l, z1, anchors, kind=SINGLE, z2=None, m=1.0,
                  delta=0.25, trees=None):
    """Sum of integrated weights over the admissible class."""
    if s == 1:
        return 1.0
    trees = enumerate_trees(s, l, kind=kind) if trees is None else trees
    vals = [integrated_weight(Lam, Lam0, taus, t, z1, anchors, z2, m, delta) for t in trees]
    return math.fsum(vals)


def chain_tree(n_lines):
    """Twice-rooted chain z1 - ... - z2 with n_lines lines."""
    node = ("z2", ())
    for _ in range(n_lines - 1):
        node = ("int", (node,))
    return tree_from_nested(("root", (node,)), TWICE, 2)


def chain_bound(Lam, Lam0, l, z1, z2, m=1.0, delta=0.25):
    """Sum over chain lengths n <= 3l-2 of sup p_B((1+delta)/Lam_n^2; z1, z2)."""
    total = []
    for n in range(1, 3 * l - 1):
        # Lam_n^{-2} = sum of n inverse squares, each in [Lam0^-2, lo^-2]
        lo = max(Lam, 0.05 * m)
        hi = min(Lam0, 1e3 * max(Lam, m))
        var_lo = (1 + delta) * n / hi ** 2
        var_hi = (1 + delta) * n / lo ** 2
        d = abs(z1 - z2)
        # p_B(v; d) peaks in v at v = d^2
        v_star = min(max(d * d, var_lo), var_hi)
        total.append(float(hk.p_bulk(v_star, z1, z2)))
    return math.fsum(total)
