import dataclasses
import itertools
import math

import numpy as np
import pytest
from scipy import integrate

from halfspace_rg import flow as fl
from halfspace_rg import heatkernel as hk
from halfspace_rg import testfn as tf
from halfspace_rg.kernels import PairRule

from conftest import C_ROBIN, SPEC2, SPEC4, SPEC4_S3


def thin(state, row=1, stride=40):
    """Same state restricted to one z1 row and a sparse set of companion nodes."""
    pr = state.pairs
    sub = PairRule(state.z1[row:row + 1], pr.u[row:row + 1, ::stride], pr.w[row:row + 1, ::stride])
    return dataclasses.replace(state, z1=state.z1[row:row + 1], pairs=sub)


# --- schedule ------------------------------------------------------------------

def test_schedule_knots():
    cfg = fl.FlowConfig(Lam0=37.0, outputs=(2.5,))
    s = cfg.schedule()
    assert s.knots[0] == 0.125 and s.knots[-1] == 37.0
    assert np.all(np.diff(s.knots) > 0)
    for f in (1.0, 2.5):
        assert f in s.knots
        assert s.snap(f) % 2 == 0        # even steps on every segment
    assert s.snap(0.0) == 0
    assert s.evals.size == 2 * s.K + 1
    with pytest.raises(fl.SchedulingError):
        fl.FlowSchedule.build(2.0, 1.0, 10)
    with pytest.raises(fl.SchedulingError):
        fl.FlowSchedule([1.0, 1.0, 2.0])


def test_direction_classes():
    assert fl.FlowSchedule.direction(4, 1, 0) == "down"
    assert fl.FlowSchedule.direction(2, 2, 1) == "down"
    assert fl.FlowSchedule.direction(4, 0, 0) == "up"
    assert fl.FlowSchedule.direction(2, 0, 2) == "up"


# --- tree level ----------------------------------------------------------------

def test_tree_level_folds():
    z = np.array([0.0, 0.4, 3.0])
    ker = fl.tree_level_init(1.7, z)
    assert len(ker.terms) == 1 and ker.terms[0].clusters == ((1, 2, 3, 4),)
    got = tf.fold(ker, tf.TestFunctionSpec.plain(4))
    np.testing.assert_array_equal(got, [1.7 / 8, 1.7, 1.7])
    got = tf.fold(ker, SPEC4)
    want = 1.7 * np.prod([hk.p_robin(t, z, y, C_ROBIN) for t, y in zip(SPEC4.taus, SPEC4.anchors)], axis=0)
    want[0] /= 8
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_tree_level_counterterm(robin_state):
    ct = fl.extract_counterterms(robin_state, 0, 1.0)
    assert np.all(ct.c[1:] == 1.0) and ct.c[0] == 0.125
    assert np.all(ct.a == 0)


def test_tree_level_remainder_vanishes(robin_state):
    ker = robin_state.kernel(0, 4, 1.0)
    assert np.all(fl.difference_remainder_four_point(ker, SPEC4) == 0.0)
    assert np.all(fl.taylor_remainder_four_point(ker, SPEC4) == 0.0)


# --- closed forms and right-hand sides --------------------------------------------

@pytest.mark.parametrize("Lam", [0.3, 1.0, 7.0])
def test_cdot_trace(Lam):
    want = -(2 / Lam ** 3) * math.exp(-1 / Lam ** 2) * Lam ** 3 / (8 * math.pi ** 1.5)
    assert fl.cdot_trace(Lam, 1.0) == pytest.approx(want, rel=1e-15)
    assert fl.cdot_trace_radial(Lam, 1.0) == pytest.approx(want, rel=1e-11)


def test_tadpole_increment_closed_form(robin_state):
    cfg = robin_state.config
    for Lam in (0.4, 1.0, 3.0, 9.0):
        ker = fl.rhs_linear(robin_state, 1, 2, Lam)
        (term,) = ker.terms
        assert term.clusters == ((1, 2),)
        z = robin_state.z1
        ref = np.array([0.5 * cfg.coupling * fl.cdot_trace_radial(Lam, cfg.m) *
                        hk.p_robin_quad(1 / Lam ** 2, x, x, C_ROBIN) for x in z])
        np.testing.assert_allclose(term.values, ref, rtol=1e-8)


@pytest.mark.parametrize("Lam", [0.5, 2.0])
def test_tadpole_bulk_matches_momentum_loop(Lam):
    cfg = fl.FlowConfig(c=C_ROBIN)
    far = float(fl.tadpole_rate(Lam, 40.0, cfg))
    assert far == pytest.approx(fl.tadpole_bulk_momentum(Lam, cfg, 1.0), rel=1e-10)
    iso = fl.tadpole_bulk_momentum(Lam, cfg, 2.0)
    assert iso / far == pytest.approx(1 / math.sqrt(2), rel=1e-10)


def test_tree_level_has_no_flow(robin_state):
    for n in (2, 4):
        assert fl.rhs_linear(robin_state, 0, n, 1.0).terms == []
        assert fl.rhs_quadratic(robin_state, 0, n, 1.0).terms == []
    assert fl.rhs_quadratic(robin_state, 1, 2, 1.0).terms == []
    with pytest.raises(fl.SchedulingError):
        fl.rhs_linear(robin_state, 2, 2, 1.0)
    with pytest.raises(fl.SchedulingError):
        fl.rhs_linear(robin_state, 1, 6, 1.0)
    with pytest.raises(ValueError):
        fl.rhs_quadratic(robin_state, 1, 4, 1.0, w=3)


def test_split_counts():
    legs = range(1, 5)
    seen = {frozenset(p[:2]) for p in itertools.permutations(legs)}
    assert len(fl.rsym_splits(4, 2)) == len(seen) == 6
    six = {frozenset([frozenset(p[:3]), frozenset(p[3:])]) for p in itertools.permutations(range(1, 7))}
    assert len(fl.tree_six_point_splits()) == len(six) == 10


def test_four_point_channels(robin_state):
    ker = robin_state.kernel(1, 4, 1.0)
    names = sorted(t.label for t in ker.terms)
    assert names.count("bubble") == 3 and names.count("reducible_u") == 3
    assert names.count("reducible_z1") == 1 and names.count("counterterm") == 1
    with pytest.raises(fl.SchedulingError):
        robin_state.kernel(2, 2, 1.0)


def test_bubble_rate_integrates_to_field(robin_state):
    # one Simpson step of rhs_linear (adaptive lam quadrature per pair) reproduces
    # the increment of the stored bubble field between two neighbouring knots
    st = thin(robin_state, row=1, stride=60)
    k = st.schedule.snap(1.0)
    lo, hi = st.knots[k], st.knots[k + 1]
    mid = math.sqrt(lo * hi)

    def rate(L):
        ker = fl.rhs_linear(st, 1, 4, L)
        return next(t.values[0] for t in ker.terms if t.label == "bubble") * L

    h = math.log(hi / lo)
    want = h / 6 * (rate(lo) + 4 * rate(mid) + rate(hi))
    full = robin_state.fields["bubble"][:, 1, ::60]
    got = full[k + 1] - full[k]
    assert np.max(np.abs(got - want)) <= 1e-6 * np.max(np.abs(want))


def test_two_point_rate_matches_field(robin_state):
    st = robin_state
    k = st.schedule.snap(2.0)
    lo, hi = st.knots[k], st.knots[k + 1]
    mid = math.sqrt(lo * hi)
    rows = list(st.config.row_indices())
    rate = lambda L: fl.rhs_linear(st, 1, 2, L).terms[0].values * L
    want = math.log(hi / lo) / 6 * (rate(lo) + 4 * rate(mid) + rate(hi))
    got = st.A_full[k + 1, rows] - st.A_full[k, rows]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_bubble_matches_nested_quadrature(robin_state):
    st = robin_state
    cfg = st.config
    k = st.schedule.snap(2.0)
    L = st.knots[k]
    B = st.fields["bubble"][k]
    for r, j in [(1, 5), (1, 60), (2, 120), (0, 40)]:
        want = fl.bubble_nested_quadrature(cfg, L, st.z1[r], st.pairs.u[r, j])
        assert B[r, j] == pytest.approx(want, rel=1e-6)


def test_reducible_piece_closed_form(robin_state):
    from halfspace_rg import propagator as pg
    st = robin_state
    cfg = st.config
    k = st.schedule.snap(2.0)
    L = st.knots[k]
    spec = pg.PropagatorSpec(cfg.m, pg.BoundaryCondition.robin(C_ROBIN), L, cfg.Lam0)
    F = st.fields["reducible_u"][k]
    peak = np.max(np.abs(F))
    for r, j in [(1, 5), (1, 60), (3, 100)]:
        z, u = st.z1[r], st.pairs.u[r, j]
        A = fl.tadpole_integral(L, u, cfg) - fl.tadpole_integral(st.knots[0], u, cfg)
        want = -cfg.coupling * pg.C_reg(spec, 0.0, z, u) * A
        assert abs(F[r, j] - want) <= 1e-7 * peak


# --- integration, BPHZ and boundary conditions at Lam0 --------------------------

def test_step_halving(robin_state):
    assert fl.step_halving_error(robin_state)["max_rel"] <= 1e-6


def test_accuracy_error_on_coarse_knots():
    cfg = fl.FlowConfig(Lam0=10.0, rows=(5,), knots_per_decade=3, step_tol=1e-9)
    with pytest.raises(fl.AccuracyError):
        fl.integrate_flow(cfg)


def test_bphz_at_lowest_scale(robin_state, two_point_ladder):
    ct = fl.extract_counterterms(robin_state, 1, 0.0)
    for k, v in ct.max_abs().items():
        assert v <= 1e-8, k
    for st in two_point_ladder:
        ct = fl.extract_counterterms(st, 1, 0.0)
        assert np.all(np.isnan(ct.c))
        assert max(ct.max_abs()[k] for k in "asdb") <= 1e-8
    assert np.max(np.abs(robin_state.c_up[0])) == 0.0


def test_irrelevant_parts_vanish_at_lam0(robin_state):
    st = robin_state
    for name, arr in st.fields.items():
        assert np.all(arr[-1] == 0.0), name
    for t in st.tracked.values():
        assert np.all(t["remainder"][-1] == 0.0)
    np.testing.assert_array_equal(st.A_full[-1], st.a_bare)


def test_a1_is_integrated_tadpole(robin_state):
    st = robin_state
    cfg = st.config
    scale = np.max(np.abs(st.a_bare))
    for L in (0.5, 1.0, 4.0):
        k = st.schedule.snap(L)
        Lk = st.knots[k]
        ct = fl.extract_counterterms(st, 1, Lk)
        for r, z in enumerate(st.z1):
            ref = fl.tadpole_integral(Lk, z, cfg) - fl.tadpole_integral(st.knots[0], z, cfg)
            ref *= float(tf.boundary_weight(2, z))
            assert abs(ct.a[r] - ref) <= 1e-8 * scale
        rows = list(cfg.row_indices())
        np.testing.assert_allclose(ct.a, st.a_up[k, rows], rtol=0, atol=1e-12 * scale)


def test_local_two_point_has_no_moments(robin_state):
    ct = fl.extract_counterterms(robin_state, 1, 2.0)
    assert np.all(ct.s == 0) and np.all(ct.d == 0) and np.all(ct.b == 0)


def test_missing_momentum_channel():
    class NoDp2(fl.FlowState):
        def kernel(self, l, n, Lam, on="rows"):
            ker = super().kernel(l, n, Lam, on)
            ker.terms = [t for t in ker.terms if t.momentum_slot != "dp2"]
            return ker

    st = fl.integrate_flow(fl.FlowConfig(Lam0=10.0, rows=()))
    st2 = NoDp2(**{f.name: getattr(st, f.name) for f in dataclasses.fields(st)})
    with pytest.raises(fl.ChannelError):
        fl.extract_counterterms(st2, 1, 1.0)


def _surface_ratio(state, Lam, z_min=6.0):
    g = state.grid.nodes
    k = state.schedule.snap(Lam)
    A = state.A_full[k]
    bulk = A[-1]
    far = g >= z_min / state.config.m
    return np.abs(A[far] - bulk) / abs(A[0] - bulk), g[far]


def test_surface_part_follows_image_decay(two_point_ladder):
    # image term p_B(1/Lam^2; 2z) against exp(-m^2/Lam^2) peaks at exp(-2 sqrt2 m z)
    for st in two_point_ladder[:1]:
        for L in (1.0, 10.0):
            ratio, z = _surface_ratio(st, L)
            assert np.all(ratio <= 2 * np.exp(-2 * math.sqrt(2) * z) + 1e-13)


def test_bulk_reduction_beyond_six_over_m(two_point_ladder):
    # surface parts of a at z1 >= 6/m below 1e-10 of the wall value (s, d, b vanish)
    st = two_point_ladder[0]
    worst = max(float(np.max(_surface_ratio(st, L)[0])) for L in (1.0, st.config.Lam0))
    assert worst <= 1e-10


# --- reconstruction and remainders --------------------------------------------

@pytest.mark.parametrize("name,spec", [("phi", SPEC4), ("phi_s3", SPEC4_S3)])
def test_reconstruction_identity(robin_state, name, spec):
    for L in (0.3, 1.0, 2.0, 6.0):
        full = fl.full_fold_four_point(robin_state, spec, L)
        rec = fl.reconstruct_four_point(robin_state, name, L)
        assert np.max(np.abs(full - rec)) <= 1e-8 * np.max(np.abs(full))


def test_remainder_routes_agree(robin_state, rng):
    for _ in range(4):
        taus = tuple(10 ** rng.uniform(-1.5, 0, 3))
        anchors = tuple(rng.uniform(0, 2, 3))
        s4 = tf.TestFunctionSpec.plain(4, taus, anchors, c=C_ROBIN)
        s2 = tf.TestFunctionSpec.plain(2, taus[:1], anchors[:1], c=C_ROBIN)
        rep = fl.taylor_remainders(robin_state, s2, s4, float(rng.uniform(0.3, 5)))
        assert rep["rel_disagreement"] <= 1e-8


def test_constant_test_function_has_no_remainder(robin_state):
    ker = robin_state.kernel(1, 4, 1.0)
    const = tf.TestFunctionSpec.plain(4)
    assert np.all(fl.taylor_remainder_four_point(ker, const) == 0.0)
    assert np.max(np.abs(fl.difference_remainder_four_point(ker, const))) == 0.0


def test_bose_symmetry_of_folds(robin_state):
    ker = robin_state.kernel(1, 4, 1.5)
    base = tf.fold(ker, SPEC4)
    for perm in itertools.permutations(range(3)):
        s = tf.TestFunctionSpec.plain(4, tuple(SPEC4.taus[i] for i in perm),
                                      tuple(SPEC4.anchors[i] for i in perm), c=C_ROBIN)
        np.testing.assert_allclose(tf.fold(ker, s), base, rtol=1e-12)


# --- envelopes ------------------------------------------------------------------

def test_tree_level_envelope_below_constant(robin_state):
    spec = tf.TestFunctionSpec.plain(4, (0.5, 0.5), (0.5, 1.0), c=C_ROBIN)
    vals = [fl.envelope_ratio(robin_state, 0, 4, spec, L, zi) for L in (0.5, 2.0, 8.0) for zi in (1, 2)]
    s = spec.s
    assert 0 < min(vals) and max(vals) <= 2 ** s * 1.25 ** (s / 2)


def test_two_point_envelope_bounded_on_ladder(two_point_ladder):
    rep = fl.bound_check(two_point_ladder, "one", l=1, n=2, spec=SPEC2, lams=(0.5, 2.0),
                         z_indices=(0, 40))
    assert rep["bounded"] and all(np.isfinite(rep["max_ratio"]))


# --- snapshots --------------------------------------------------------------------

def test_snapshot_round_trip(robin_state, tmp_path):
    p = tmp_path / "s.zip"
    man = fl.save_snapshot(robin_state, p)
    back = fl.load_snapshot(p, man)
    assert back.config == robin_state.config
    for L in (0.0, 1.0):
        a = fl.extract_counterterms(robin_state, 1, L)
        b = fl.extract_counterterms(back, 1, L)
        for k in "zasdbc":
            np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    man2 = fl.save_snapshot(back, tmp_path / "t.zip")
    assert man2["sha256"] == man["sha256"]
    bad = dict(man, sha256="0" * 64)
    with pytest.raises(ValueError):
        fl.load_snapshot(p, bad)
