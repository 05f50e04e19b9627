import json
import math

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab.cli import main
from fbsdelab.config import emit_config, parse_config, validate_config
from fbsdelab.errors import ConfigError
from fbsdelab.experiments import OUT_ENV, run_experiment
from fbsdelab.export import format_cell, parse_cell, read_report, read_table, write_table

LP_MINIMAL = """
kind: lp-verify
seed: 7
problem:
  family: example1
"""

FAST = {"grid": {"n_steps": 16}, "monte_carlo": {"n_paths": 200}}


def config_file(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc) if isinstance(doc, dict) else doc)
    return str(path)


def test_minimal_lp_config_gets_defaults():
    cfg = parse_config(LP_MINIMAL)
    assert cfg.kind == "lp-verify" and cfg.seed == 7
    assert cfg.experiment["p"] == 2.0 and cfg.experiment["xis"] == [0.0, 1.0, 2.0, 4.0]
    assert cfg.problem["params"]["a"] == 1.0
    assert cfg.n_paths == 1000 and cfg.n_steps == 64


def test_unknown_key_is_named():
    doc = LP_MINIMAL + "  params: {sigma_z: 0.1}\n"
    with pytest.raises(ConfigError, match="sigma_z"):
        parse_config(doc)


def test_zero_paths_rejected():
    with pytest.raises(ConfigError, match="n_paths"):
        parse_config(LP_MINIMAL + "monte_carlo: {n_paths: 0}\n")


def test_missing_seed_named():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("kind: lp-verify\nproblem: {family: example1}\n")


def test_missing_required_kind_field():
    with pytest.raises(ConfigError, match="experiment.L_sigma"):
        parse_config("kind: kp-gate\nseed: 0\nexperiment: {p: 2, K: 1}\n")


def test_bad_kind_and_family():
    with pytest.raises(ConfigError, match="kind"):
        parse_config("kind: plot\nseed: 0\n")
    with pytest.raises(ConfigError, match="family"):
        parse_config("kind: solve\nseed: 0\nproblem: {family: heston}\n")
    with pytest.raises(ConfigError, match="family = lq"):
        parse_config("kind: lq\nseed: 0\nproblem: {family: example1}\n")


def test_type_errors():
    with pytest.raises(ConfigError, match="grid.n_steps"):
        parse_config(LP_MINIMAL + "grid: {n_steps: 1.5}\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config("kind: kp-gate\nseed: true\nexperiment: {p: 2, K: 1, L_sigma: 0}\n")


def test_parse_error_reports_position():
    with pytest.raises(ConfigError, match=r"line \d+, column \d+"):
        parse_config("kind: solve\nseed: [1,\n")


@pytest.mark.parametrize("text", [
    LP_MINIMAL,
    "kind: kp-gate\nseed: 0\nexperiment: {p: 3, K: 1, L_sigma: 0.2, C1: 1.5, k: 3}\n",
    "kind: lq\nseed: 1\nproblem: {family: lq, params: {n: 2, m_u: 1, A: [[0, 1], [0, 0]],"
    " B: [[0], [1]], Q: 1, R: 1, x0: [1, 0]}}\n",
    "kind: field\nseed: 1\nproblem: {family: example1, params: {a: {times: [0, 0.5],"
    " values: [1, 2]}}}\nsolver: {grid_nodes: 9}\n",
    "kind: solve\nseed: 2\nproblem: {family: polynomial, params: {terms: {b: [[0.5, 0, 1, 0]],"
    " phi: [[1, 1]]}, K: 1, L: 1}}\n",
])
def test_round_trip(text):
    cfg = parse_config(text)
    assert parse_config(emit_config(cfg)) == cfg


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), paths=st.integers(1, 10**6), steps=st.integers(1, 4096),
       p=st.floats(1, 10, allow_nan=False), xis=st.lists(st.floats(-1e6, 1e6), min_size=1,
                                                         max_size=5))
def test_round_trip_property(seed, paths, steps, p, xis):
    cfg = validate_config({"kind": "lp-verify", "seed": seed, "problem": {"family": "example1"},
                           "grid": {"n_steps": steps}, "monte_carlo": {"n_paths": paths},
                           "experiment": {"p": p, "xis": xis}})
    assert parse_config(emit_config(cfg)) == cfg


@settings(max_examples=100, deadline=None)
@given(st.one_of(st.floats(allow_nan=False), st.integers(-10**12, 10**12), st.booleans()))
def test_cells_round_trip(v):
    back = parse_cell(format_cell(v))
    assert back == v and type(back) is type(v)


def test_non_finite_cells():
    assert parse_cell(format_cell(math.inf)) == math.inf
    assert math.isnan(parse_cell(format_cell(math.nan)))
    assert parse_cell(format_cell([1.5, 2.0])) == [1.5, 2.0]


def test_table_round_trip(tmp_path):
    rows = [{"t": 0.1, "value": 1 / 3, "flag": True, "seed": 5},
            {"t": 0.2, "value": -2e-300, "flag": False, "seed": 5}]
    path = write_table(tmp_path / "t.csv", rows)
    assert read_table(path) == rows
    assert not list(tmp_path.glob(".t.csv.*"))


def test_lp_verify_manifest(tmp_path):
    cfg = validate_config({"kind": "lp-verify", "seed": 3, "problem": {"family": "example1"},
                           "output": {"dir": str(tmp_path)}, **FAST})
    rep = run_experiment(cfg)
    assert set(rep.files) == {"report", "lp_table", "stability_table"}
    for name in ("lp_table", "stability_table"):
        rows = read_table(rep.files[name])
        assert rows and all(r["seed"] == 3 and r["n_steps"] == 16 for r in rows)
    report = read_report(rep.files["report"])
    assert report["config"]["seed"] == 3 and "wall_clock_seconds" in report


def test_same_config_byte_identical_tables(tmp_path):
    doc = {"kind": "lq", "seed": 5, "problem": {"family": "lq", "params": {"B": 1, "Q": 1,
                                                                           "R": 1, "H": 1}},
           **FAST, "experiment": {"n_perturbations": 3, "certificate_samples": 100}}
    a = run_experiment(validate_config({**doc, "output": {"dir": str(tmp_path / "a")}}))
    b = run_experiment(validate_config({**doc, "output": {"dir": str(tmp_path / "b")}}))
    for name in a.tables:
        with open(a.files[name], "rb") as fa, open(b.files[name], "rb") as fb:
            assert fa.read() == fb.read()


def test_kp_gate_report(tmp_path):
    cfg = validate_config({"kind": "kp-gate", "seed": 0, "output": {"dir": str(tmp_path)},
                           "experiment": {"p": 2, "K_upper": 1, "K_lower": 1, "L_sigma": 0.1,
                                          "K": 1}})
    rep = run_experiment(cfg)
    report = read_report(rep.files["report"])
    assert report["outputs"]["K_p"] == 20 / 3
    assert report["outputs"]["h51"] is True


def test_cli_runs_and_flags_override(tmp_path, capsys):
    path = config_file(tmp_path, {"kind": "solve", "seed": 1,
                                  "problem": {"family": "gaussian-linear"}, **FAST})
    out = tmp_path / "out"
    code = main(["solve", "--config", path, "--seed", "9", "--n-steps", "8", "--out", str(out)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["kind"] == "solve"
    rows = read_table(out / "solution_table.csv")
    assert len(rows) == 9 and rows[0]["seed"] == 9
    assert read_report(out / "report.json")["config"]["grid"]["n_steps"] == 8


def test_cli_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    path = config_file(tmp_path, {"kind": "kp-gate", "seed": 0,
                                  "experiment": {"p": 3, "K": 1, "L_sigma": 0.1}})
    assert main(["kp-gate", "--config", path]) == 0
    assert (tmp_path / "env" / "kp_table.csv").exists()


def test_cli_config_error_exit_code(tmp_path, caplog):
    path = config_file(tmp_path, LP_MINIMAL + "bogus: 1\n")
    assert main(["lp-verify", "--config", path]) == 2
    assert "bogus" in caplog.text


def test_cli_kind_mismatch(tmp_path):
    path = config_file(tmp_path, LP_MINIMAL)
    assert main(["solve", "--config", path]) == 2


def test_cli_numerical_failure_exit_code(tmp_path):
    doc = {"kind": "field", "seed": 0, "grid": {"n_steps": 1},
           "problem": {"family": "polynomial",
                       "params": {"terms": {"sigma": [[1, 0, 0, 0]], "f": [[1e9, 0, 1, 0]],
                                            "phi": [[1, 1]]}}},
           "output": {"dir": str(tmp_path)}}
    assert main(["field", "--config", config_file(tmp_path, doc)]) == 3


def test_cli_io_error_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = config_file(tmp_path, {"kind": "kp-gate", "seed": 0,
                                  "experiment": {"p": 3, "K": 1, "L_sigma": 0.1}})
    assert main(["kp-gate", "--config", path, "--out", str(blocker / "sub")]) == 4
    assert main(["kp-gate", "--config", str(tmp_path / "missing.yaml")]) == 4


def test_cli_spec_violation_is_config_error(tmp_path):
    doc = {"kind": "lq", "seed": 0, "problem": {"family": "lq", "params": {"Q": -0.1}},
           "output": {"dir": str(tmp_path)}}
    assert main(["lq", "--config", config_file(tmp_path, doc)]) == 2


@pytest.mark.parametrize("kind,problem", [
    ("field", {"family": "affine", "params": {"n": 2, "s0": [1.0, 0.5], "H": [[1.0, 0.0]],
                                               "bx": [[0, 1], [0, 0]]}}),
    ("stability", {"family": "example1"}),
    ("oracle", {"family": "gaussian-linear", "params": {"phi_slope": 2.0}}),
])
def test_other_kinds_run(tmp_path, kind, problem):
    doc = {"kind": kind, "seed": 4, "problem": problem, **FAST, "output": {"dir": str(tmp_path)},
           "solver": {"grid_nodes": 9}}
    if kind == "oracle":
        doc["experiment"] = {"n_steps_list": [4, 8], "reference_steps": 16}
    rep = run_experiment(validate_config(doc))
    assert "report" in rep.files and len(rep.files) >= 2
