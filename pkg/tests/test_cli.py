import csv
import io
import json

import pytest

from halfspace_rg import cli


def run(tmp_path, command, ini, *extra, env=None, name="out"):
    cfgp = tmp_path / f"{name}.ini"
    cfgp.write_text(ini)
    out = tmp_path / name
    code = cli.main([command, "--config", str(cfgp), "--out", str(out), *extra], environ=env or {})
    return code, out


def table(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#schema=") and lines[1].startswith("#version=")
    assert lines[2].startswith("#config=")
    return list(csv.DictReader(io.StringIO("\n".join(lines[3:]))))


PROP = """
[physical]
bc = robin
c = 2.0
[task]
momenta = 0.0, 1.0
z = 0.0, 0.4
zp = 0.05, 0.7
"""


def test_propagator_table(tmp_path):
    code, out = run(tmp_path, "propagator", PROP)
    assert code == 0
    rows = table(out / "propagator.csv")
    assert len(rows) == 8
    for r in rows:
        assert abs(float(r["bc_residual"])) <= 1e-8
        if float(r["z"]) == 0.0:
            assert float(r["C_reg_dirichlet"]) == 0.0
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["checksums"]) == {"propagator.csv"}
    assert "c = 2.0" in man["config"]["file"]


def test_propagator_empty_range(tmp_path):
    code, out = run(tmp_path, "propagator", PROP.replace("z = 0.0, 0.4", "z ="))
    assert code == 0
    assert table(out / "propagator.csv") == []


@pytest.mark.parametrize("ini,env", [
    ("[numerical]\nlam = 20\n", None),
    ("[task]\nz = -1\n", None),
    ("[physical]\nm = abc\n", None),
    ("[physical]\nc = -1\n", None),
    ("not an ini", None),
    ("", {"HSRG_BOGUS_X": "1"}),
])
def test_config_errors_exit_2(tmp_path, ini, env):
    code, _ = run(tmp_path, "propagator", ini, env=env)
    assert code == 2


def test_env_override(tmp_path):
    code, out = run(tmp_path, "propagator", PROP, env={"HSRG_PHYSICAL_C": "0.0"})
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["effective"]["physical"]["c"] == "0.0"
    assert man["config"]["env"] == {"HSRG_PHYSICAL_C": "0.0"}


def test_unknown_subcommand_and_workers(tmp_path):
    assert cli.main(["nope"], environ={}) == 2
    assert cli.main(["trees", "--workers", "0", "--out", str(tmp_path / "w")], environ={}) == 2


FLOW = """
[physical]
c = 0.7
[numerical]
lam0 = 10
rows = 0, 10, 20, 30, 40
"""


@pytest.fixture(scope="module")
def flow_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("flow")
    code, out = run(tmp, "flow", FLOW)
    assert code == 0
    return tmp, out


def test_flow_outputs(flow_run):
    _, out = flow_run
    rows = table(out / "counterterms.csv")
    for r in rows:
        for k in "asdbc":
            assert abs(float(r[k])) <= 1e-8
    tree = table(out / "counterterms_tree.csv")
    assert float(tree[1]["c"]) == 1.0
    rep = json.loads((out / "flow_report.json").read_text())
    assert not rep["violation"] and rep["step_halving"]["max_rel"] <= 1e-6


def test_flow_snapshot_reload(flow_run):
    tmp, out = flow_run
    code, out2 = run(tmp, "flow", FLOW, "--from-snapshot", str(out / "state.bin"), name="reload")
    assert code == 0
    assert (out2 / "counterterms.csv").read_bytes() == (out / "counterterms.csv").read_bytes()


def test_flow_bit_identical_across_workers(flow_run):
    tmp, out = flow_run
    code, out2 = run(tmp, "flow", FLOW, "--workers", "2", name="w2")
    assert code == 0
    for f in ("counterterms.csv", "state.bin", "state.bin.json", "flow_report.json", "manifest.json"):
        assert (out2 / f).read_bytes() == (out / f).read_bytes(), f


def test_flow_strict_violation(tmp_path):
    ini = FLOW.replace("0, 10, 20, 30, 40", "30") + "tol = 1e-300\n"
    assert run(tmp_path, "flow", ini, "--strict")[0] == 4
    assert run(tmp_path, "flow", ini, name="lax")[0] == 0


def test_flow_numerical_error(tmp_path):
    ini = FLOW.replace("rows = 0, 10, 20, 30, 40", "rows = 5\nknots_per_decade = 4\nstep_tol = 1e-12")
    assert run(tmp_path, "flow", ini)[0] == 3


TREES = """
[task]
s = {s}
l = {l}
taus = {taus}
anchors = {anchors}
z = 0.0, 0.5
"""


def test_trees_single_edge(tmp_path):
    code, out = run(tmp_path, "trees", TREES.format(s=2, l=0, taus="0.5", anchors="1.0"))
    assert code == 0
    assert (out / "trees.txt").read_text().splitlines() == ["R(y2)\tv2=0\tc1=1"]
    assert len(table(out / "tree_weights.csv")) == 2


def test_trees_stable(tmp_path):
    ini = TREES.format(s=3, l=1, taus="0.5,0.3", anchors="1.0,0.2").replace("z = 0.0, 0.5", "z = 0.3")
    a = run(tmp_path, "trees", ini, name="a")[1]
    b = run(tmp_path, "trees", ini, name="b")[1]
    assert len((a / "trees.txt").read_text().splitlines()) == 10
    for f in ("trees.txt", "tree_weights.csv", "manifest.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


BOUNDS = """
[numerical]
rows = 0, 30
[task]
l = {l}
n = {n}
taus = 0.5
anchors = 1.0
ladder = {ladder}
lams = 0.5, 2.0
z_rows = {z}
"""


def test_bounds_tree_level(tmp_path):
    code, out = run(tmp_path, "bounds", BOUNDS.format(l=0, n=4, ladder="10, 20", z="0, 30"))
    assert code == 0
    rep = json.loads((out / "bounds.json").read_text())["report"]
    assert rep["bounded"]
    assert rep["max_ratio"][0] == pytest.approx(rep["max_ratio"][1], rel=1e-12)


def test_bounds_two_point(tmp_path):
    code, out = run(tmp_path, "bounds", BOUNDS.format(l=1, n=2, ladder="10, 100, 1000", z="0, 40"))
    assert code == 0
    rep = json.loads((out / "bounds.json").read_text())["report"]
    assert rep["bounded"] and all(x > 0 for x in rep["max_ratio"])


def test_bounds_empty_ladder(tmp_path):
    assert run(tmp_path, "bounds", BOUNDS.format(l=0, n=4, ladder="", z="0"))[0] == 2


def test_converge_rejects_single_point(tmp_path):
    assert run(tmp_path, "converge", "[task]\nladder = 10\n")[0] == 2


def test_converge_report(tmp_path):
    ini = "[physical]\nc = 0.7\n[numerical]\nrows = 0, 30\n[task]\nladder = 10, 20, 40\n"
    code, out = run(tmp_path, "converge", ini)
    assert code == 0
    rep = json.loads((out / "converge.json").read_text())["report"]
    assert "Lam0" in rep["prediction"]
    for k in ("c1_at_0", "a1_bulk_at_0", "folded_L12_at_0", "c1_at_probe"):
        assert len(rep[k]["differences"]) == 2


SAMPLE = """
[physical]
c = 1.5
[numerical]
lam = 0.2
[task]
count = 20000
n_nodes = 16
"""


def test_sample_reproducible(tmp_path):
    a = run(tmp_path, "sample", SAMPLE, "--seed", "4", name="a")
    b = run(tmp_path, "sample", SAMPLE, "--seed", "4", "--workers", "2", name="b")
    assert a[0] == b[0] == 0
    ja, jb = (x[1] / "sample.json" for x in (a, b))
    assert ja.read_bytes() == jb.read_bytes()
    st = json.loads(ja.read_text())["stats"][0]
    assert st["eigen"]["eig_min"] >= -1e-10 * st["eigen"]["eig_max"]
    assert "eigen_floor" in st["eigen"]
    r = st["robin_regression"]
    assert abs(r["slope"] - 1.5) <= 4 * r["se"]
