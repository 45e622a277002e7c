import csv
import json
import shutil
from fractions import Fraction as F
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from wemhd import cli, geometry as geo, stress as sm
from wemhd.spectral import TorusGrid, write_dump

# desk-grid step flags: the witness r ~ 1 and ell << 1 are not resolvable on 16^3
DESK = ["--lambda", "8", "--min-cells", "0.1", "--r", "0.125"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def read_json(path):
    return json.loads(Path(path).read_text())


def init_state(capsys, out, preset="two-mode", case="I", grid="16x16"):
    code, _, err = run(capsys, "init", "--preset", preset, "--case", case, "--grid", grid, "--out", out)
    assert code == 0, err


# -- parsing -------------------------------------------------------------------------


@pytest.mark.parametrize("text", ["16", "2pi*16", "2*pi*16", "2PI16"])
def test_parse_lambda_forms(text):
    assert cli.parse_lambda(text) == 16


@pytest.mark.parametrize("text", ["0", "pi*3", "2pi*x", "-4"])
def test_parse_lambda_rejects(text):
    with pytest.raises(cli.UsageError):
        cli.parse_lambda(text)


def test_parse_grid():
    assert cli.parse_grid("32x16") == (32, 16, None)
    assert cli.parse_grid("24") == (24, 24, None)
    assert cli.parse_grid("32x16x2") == (32, 16, 2)
    with pytest.raises(cli.UsageError):
        cli.parse_grid("32by16")


def admissible(case, a):
    return F(1) <= a <= F(2) if case == "I" else F(1) <= a < F(3)


@settings(max_examples=60, deadline=None)
@given(hst.sampled_from(["I", "II"]), hst.fractions(min_value=0, max_value=4, max_denominator=12))
def test_alpha_admissibility(case, a):
    cfg = cli.RunConfig(case=case, alpha=f"{a.numerator}/{a.denominator}")
    if admissible(case, a):
        assert cfg.validate().alpha_value == a
    else:
        with pytest.raises(cli.UsageError):
            cfg.validate()


def test_config_file_then_flags(workdir):
    path = workdir / "run.cfg"
    path.write_text("[run]\ncase = II\nalpha = 3/2  # comment\ndissipation = off\n"
                    "[grid]\nn_space = 16\nn_time = 8\n[frequency]\nlambda = 2pi*4\n"
                    "[slack]\neps = 1/1000\n[seed]\nh = zero\n[numerics]\nworkers = 2\n")
    args = cli.build_parser().parse_args(["init", "--config", str(path), "--alpha", "2"])
    cfg = cli.build_config(args)
    assert (cfg.case, cfg.alpha, cfg.dissipation_on) == ("II", "2/1", False)
    assert (cfg.n_space, cfg.n_time, cfg.lam_index) == (16, 8, 4)
    assert (cfg.eps, cfg.seed, cfg.workers) == ("1/1000", "zero", 2)


@pytest.mark.parametrize("body", ["[bogus]\nx = 1\n", "[run]\ncolour = red\n", "[grid]\nn_space = many\n",
                                  "not a config"])
def test_bad_config_exits_1(workdir, capsys, body):
    (workdir / "bad.cfg").write_text(body)
    code, _, err = run(capsys, "plan", "--config", "bad.cfg")
    assert code == 1 and "error" in err


def test_usage_exit_codes(capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "--version")[0] == 0


# -- plan ------------------------------------------------------------------------------


def test_plan_case1_alpha2(workdir, capsys):
    code, out, _ = run(capsys, "plan", "--case", "I", "--alpha", "2", "--out", "p")
    doc = json.loads(out)
    assert code == 0 and doc["sup_value"] == "4/3" and doc["objective"] == "gamma_sup"
    assert read_json("p/plan.json") == doc
    assert {"case", "alpha", "objective", "sup_value", "witness", "binding_constraints"} <= set(doc)


def test_plan_case2_alpha1(workdir, capsys):
    code, out, _ = run(capsys, "plan", "--case", "II", "--alpha", "1", "--out", "p")
    assert code == 0 and json.loads(out)["sup_value"] == "6/5"


def test_plan_infeasible_writes_certificate(workdir, capsys):
    code, out, _ = run(capsys, "plan", "--case", "I", "--alpha", "3", "--out", "p")
    cert = read_json("p/plan.json")
    assert code == 2 and cert == json.loads(out)
    assert cert["feasible"] is False and {"I.1", "I.2"} <= set(cert["binding_constraints"])


def test_plan_slack_overrides(workdir, capsys):
    code, out, _ = run(capsys, "plan", "--case", "I", "--alpha", "2", "--eps", "1/100", "--bbeta", "1/1000000",
                       "--out", "p")
    doc = json.loads(out)
    assert code == 0 and doc["witness"]["eps"] == "1/100" and doc["sup_value"] == "4/3"
    code, _, _ = run(capsys, "plan", "--case", "I", "--alpha", "2", "--bbeta", "1", "--out", "p")
    assert code == 2 and "I.2" in read_json("p/plan.json")["binding_constraints"]


def test_plan_reports_resolution(workdir, capsys):
    _, out, _ = run(capsys, "plan", "--case", "I", "--alpha", "2", "--grid", "32x32", "--out", "p")
    assert "error" in json.loads(out)["numeric"]
    _, out, _ = run(capsys, "plan", "--case", "I", "--alpha", "2", "--grid", "96x32", "--lambda", "2",
                    "--out", "p")
    numeric = json.loads(out)["numeric"]
    assert numeric["lambda"] == pytest.approx(4 * np.pi) and numeric["r"] == 1.0


def test_plan_bad_inputs(workdir, capsys):
    assert run(capsys, "plan", "--case", "III")[0] == 1
    assert run(capsys, "plan", "--alpha", "one")[0] == 1
    assert run(capsys, "plan", "--alpha", "1/2")[0] == 1
    assert run(capsys, "plan", "--eps", "-1/10")[0] == 1


# -- init ------------------------------------------------------------------------------


@pytest.mark.parametrize("preset", cli.PRESETS)
def test_init_presets(workdir, capsys, preset):
    code, out, _ = run(capsys, "init", "--preset", preset, "--grid", "16x8", "--out", "o")
    assert code == 0
    res = json.loads(out)
    assert res["residual"]["value"] < 1e-8 and res["residual"]["passed"]
    manifest = read_json("o/init-manifest.json")
    assert manifest["results"] == res
    assert manifest["config"]["seed"] == preset
    assert set(manifest["timing"]) == {"timestamp", "runtime_s"}
    assert manifest["tolerances"]["initial_residual"] == 1e-8
    assert {"m_space", "c_Phi", "c_g"} <= set(manifest["profiles"])
    state = sm.IterationState.load("o/state-q0")
    if preset == "zero":
        assert not np.any(state.A) and not np.any(state.R) and res["stress_norm_L1L1"] == 0.0
    else:
        assert res["stress_norm_L1L1"] > 0


def test_init_two_mode_is_time_dependent(workdir, capsys):
    init_state(capsys, "o", "two-mode", grid="16x8")
    state = sm.IterationState.load("o/state-q0")
    assert not state.static and state.time_derivative_mode == "analytic"
    assert np.abs(state.B[0] - state.B[2]).max() > 0.5


def dump(path, h):
    g = TorusGrid(16, 8)
    write_dump(path, h, g)
    return path


def test_init_from_dump_matches_preset(workdir, capsys):
    g = TorusGrid(16, 8)
    h = np.broadcast_to(cli.abc_field(g), (8, 3) + g.shape).copy()
    dump("h.bin", h)
    assert run(capsys, "init", "--h-file", "h.bin", "--grid", "16x8", "--out", "d")[0] == 0
    assert run(capsys, "init", "--preset", "abc", "--grid", "16x8", "--out", "p")[0] == 0
    a, b = sm.IterationState.load("d/state-q0"), sm.IterationState.load("p/state-q0")
    assert np.abs(np.asarray(a.R) - np.asarray(b.R)).max() < 1e-12
    assert a.time_derivative_mode == "finite-difference"


def test_init_rejects_bad_h(workdir, capsys):
    g = TorusGrid(16, 8)
    x = np.broadcast_to(g.coords()[0], g.shape)
    h = np.zeros((8, 3) + g.shape)
    h[:, 0] = np.sin(2 * np.pi * x)
    dump("div.bin", h)
    code, _, err = run(capsys, "init", "--h-file", "div.bin", "--grid", "16x8", "--out", "o")
    assert code == 1 and "divergence" in err
    dump("mean.bin", np.ones((8, 3) + g.shape))
    code, _, err = run(capsys, "init", "--h-file", "mean.bin", "--grid", "16x8", "--out", "o")
    assert code == 1 and "mean" in err
    dump("scalar.bin", np.zeros((8, 1) + g.shape))
    assert run(capsys, "init", "--h-file", "scalar.bin", "--grid", "16x8", "--out", "o")[0] == 1
    assert run(capsys, "init", "--h-file", "div.bin", "--grid", "32x8", "--out", "o")[0] == 1
    assert run(capsys, "init", "--preset", "missing", "--out", "o")[0] == 1
    assert run(capsys, "init", "--case", "I", "--alpha", "5/2", "--out", "o")[0] == 1
    assert run(capsys, "init", "--case", "II", "--alpha", "3", "--out", "o")[0] == 1


# -- step ------------------------------------------------------------------------------


def test_step_writes_reports(workdir, capsys):
    init_state(capsys, "o")
    code, out, err = run(capsys, "step", "--out", "o", *DESK)
    assert code == 0, err
    res = json.loads(out)
    rep = Path("o/step-q1")
    assert {p.name for p in rep.iterdir()} == {"breakdown.json", "norms.csv", "check.json",
                                                 "manifest.json", "directions.txt"}
    nxt = sm.IterationState.load("o/state-q1")
    assert nxt.q == 1 and res["norms"]["R_next"] == pytest.approx(nxt.stress_norm(), rel=1e-12)
    assert all(v["passed"] for v in res["contracts"].values())
    breakdown = read_json(rep / "breakdown.json")
    rows = list(csv.reader((rep / "norms.csv").read_text().splitlines()))
    header, total = rows[0], rows[-1]
    assert header[:2] == ["slice", "t"] and len(rows) == 16 + 2
    for entry in breakdown:
        assert float(total[header.index(entry["term"])]) == entry["norm_L1L1"]
    check = read_json(rep / "check.json")
    assert [r["term"] for r in check][-3:] == ["iter-supp", "perturbation-support", "perturbation-at-t0"]
    manifest = read_json(rep / "manifest.json")
    params = manifest["parameters"]
    assert params["r"] == 0.125 and params["lam_index"] == 8 and params["witness"]["eps"] == "1/10000"
    assert geo.DirectionSet.from_text((rep / "directions.txt").read_text()).n_lambda == 3
    assert manifest["tolerances"]["residual_contract"] == {"analytic": 1e-5, "finite-difference": 1e-3}


def test_step_chain_reads_latest_state(workdir, capsys):
    init_state(capsys, "o")
    assert run(capsys, "step", "--out", "o", *DESK)[0] == 0
    assert run(capsys, "step", "--out", "o", *DESK, "--amplitude-scale", "0")[0] == 0
    assert read_json("o/step-q2/manifest.json")["results"]["source"].endswith("state-q1")


def test_step_zero_amplitude_leaves_state(workdir, capsys):
    init_state(capsys, "o")
    assert run(capsys, "step", "--out", "o", *DESK, "--amplitude-scale", "0")[0] == 0
    a, b = sm.IterationState.load("o/state-q0"), sm.IterationState.load("o/state-q1")
    for name in ("A", "dA", "B", "R"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.abs(np.asarray(a.P) - np.asarray(b.P)).max() < 1e-14


def test_step_case2_with_overrides(workdir, capsys):
    init_state(capsys, "o", "abc", case="II")
    code, _, err = run(capsys, "step", "--out", "o", *DESK)
    assert code == 3 and "blocks: resolution" in err and "jet length" in err
    code, _, err = run(capsys, "step", "--out", "o", *DESK, "--ell", "0.9", "--mu", "0.5")
    assert code == 0, err
    params = read_json("o/step-q1/manifest.json")["parameters"]
    assert (params["ell"], params["mu"]) == (0.9, 0.5)
    assert [r["term"] for r in read_json("o/step-q1/breakdown.json")][:5] == list(sm.TERMS_II)


def test_step_under_resolved_grid(workdir, capsys):
    init_state(capsys, "o")
    code, _, err = run(capsys, "step", "--out", "o", "--lambda", "16")
    assert code == 3 and "planner: resolution" in err
    assert not Path("o/state-q1").exists()


def test_step_contract_violation_names_identity(workdir, capsys, monkeypatch):
    init_state(capsys, "o")
    monkeypatch.setattr(sm, "pressure_consistency", lambda state: 1.0)
    code, _, err = run(capsys, "step", "--out", "o", *DESK)
    assert code == 3 and "stress: pressure consistency" in err
    assert "pressure consistency" in read_json("o/step-q1/manifest.json")["results"]["contracts"]["failed"]


def test_step_bad_state(workdir, capsys):
    assert run(capsys, "step", "--out", "nowhere")[0] == 1
    assert run(capsys, "step", "--state", "nowhere", "--out", "o")[0] == 1
    init_state(capsys, "o")
    code, _, err = run(capsys, "step", "--out", "o", "--case", "II", *DESK)
    assert code == 1 and "case I" in err


def test_step_workers_do_not_change_reports(workdir, capsys):
    for out, workers in (("w1", 1), ("w8", 8)):
        init_state(capsys, out)
        assert run(capsys, "step", "--out", out, *DESK, "--workers", workers)[0] == 0
    for name in ("norms.csv", "breakdown.json", "check.json"):
        assert Path(f"w1/step-q1/{name}").read_bytes() == Path(f"w8/step-q1/{name}").read_bytes()


def strip_timing(path):
    doc = read_json(path)
    doc.pop("timing")
    return doc


def test_identical_runs_identical_reports(workdir, capsys):
    kept = {}
    for attempt in range(2):
        shutil.rmtree("o", ignore_errors=True)
        init_state(capsys, "o")
        assert run(capsys, "step", "--out", "o", *DESK)[0] == 0
        kept[attempt] = {name: Path(f"o/step-q1/{name}").read_bytes()
                         for name in ("norms.csv", "breakdown.json", "check.json", "directions.txt")}
        kept[attempt]["manifest"] = strip_timing("o/step-q1/manifest.json")
        kept[attempt]["init"] = strip_timing("o/init-manifest.json")
    assert kept[0] == kept[1]


# -- verify and scaling-report ------------------------------------------------------------


def test_verify_default_passes(workdir, capsys):
    code, out, _ = run(capsys, "verify", "--grid", "16x8", "--samples", "3", "--out", "v")
    doc = json.loads(out)
    assert code == 0 and doc["passed"] and set(doc["suites"]) == set(cli.SUITES)
    for suite in doc["suites"].values():
        assert suite["runtime_s"] >= 0 and suite["checks"]
        assert all(c["passed"] for c in suite["checks"])
    assert read_json("v/verify.json") == doc


def corrupt(text, how):
    if how == "weight":
        return text.replace("| 1/5 |", "| 1/4 |", 1)
    if how == "frame":
        return text.replace("direction = 0/1 0/1 1/1", "direction = 0/1 1/1 1/1", 1)
    if how == "truncated":
        return "\n".join(text.splitlines()[:6]) + "\n"
    return text.replace("1/3", "x", 1)


@pytest.mark.parametrize("how", ["weight", "frame", "truncated", "garbage"])
def test_verify_corrupted_directions_fail_geometry(workdir, capsys, how):
    Path("dirs.txt").write_text(corrupt(geo.build_direction_set().to_text(), how))
    code, out, _ = run(capsys, "verify", "--suite", "geometry", "--suite", "planner",
                       "--directions", "dirs.txt", "--out", "v")
    doc = json.loads(out)
    assert code == 3 and not doc["suites"]["geometry"]["passed"] and doc["suites"]["planner"]["passed"]


def test_verify_intact_direction_file(workdir, capsys):
    geo.build_direction_set().save("dirs.txt")
    code, out, _ = run(capsys, "verify", "--suite", "geometry", "--directions", "dirs.txt", "--out", "v")
    assert code == 0 and json.loads(out)["suites"]["geometry"]["passed"]


def test_scaling_report_csv(workdir, capsys):
    code, out, _ = run(capsys, "scaling-report", "--family", "temporal", "--out", "s")
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and rows and all(float(r["rel_error"]) <= 0.10 for r in rows)
    assert Path("s/scaling.csv").read_text() == out
