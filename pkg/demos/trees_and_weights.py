"""Tree classes, reduction, and weight factors.

    python3 demos/trees_and_weights.py
"""
import itertools

from halfspace_rg import trees as tr

for kind in (tr.SINGLE, tr.TWICE):
    row = [len(tr.enumerate_trees(s, l, kind=kind)) for s in (2, 3, 4) for l in (0, 1, 2)]
    print(f"{kind:6s} class sizes (s=2..4 x l=0..2): {row}")

for t in tr.enumerate_trees(3, 1):
    print("  ", t.canon, "v2 =", t.v2, "c1 =", t.c1)

# reduction: a sibling pair always lands in the smaller class, an arbitrary pair not always
for sp, lp in [(4, 0), (5, 0)]:
    sib = anyp = 0
    for t in tr.enumerate_trees(sp, lp):
        by = {lab: v for v, lab in t.label.items()}
        for i, j in itertools.combinations(sorted(by), 2):
            r = tr.reduce_tree(t, i, j)
            bad = not (r.empty or tr.is_admissible(r.tree.v2, r.tree.c1, sp - 2, lp + 1))
            anyp += bad
            sib += bad and t.parent[by[i]] == t.parent[by[j]]
    print(f"reduce ({sp},{lp}) -> ({sp - 2},{lp + 1}): sibling failures {sib}, any-pair failures {anyp}")

taus, anchors = {2: 0.4, 3: 0.2}, {2: 0.9, 3: 0.1}
print(f"global weight s=3 l=1: {tr.global_weight(1.0, 30.0, taus, 3, 1, 0.3, anchors):.4e}")
for l in (1, 2):
    g = tr.global_weight(0.5, 20.0, {}, 2, l, 0.2, {}, kind=tr.TWICE, z2=0.8)
    print(f"twice-rooted l={l}: weight {g:.6f}, chain bound {tr.chain_bound(0.5, 20.0, l, 0.2, 0.8):.6f}")
