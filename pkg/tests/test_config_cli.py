import csv
import io
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslab.cli import main
from rdslab.config import BUDGET_DEFAULTS, ConfigError, ExperimentConfig, canonical_json
from rdslab.reports import artifact_version, write_csv

ESCAPING = {"custom": {"maps": [[[{"coef": 3.0, "powers": [1]}]]], "domain_radius": 1.0,
                       "initial_state": [0.5]}}


def _write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def _spectrum_cfg(out, **kw):
    d = {"system": {"name": "diag_cocycle"}, "pipeline": "spectrum", "output": str(out),
         "budgets": {"spectrum": {"n": 2000, "n_burn": 10}}}
    d.update(kw)
    return d


@pytest.mark.parametrize("bad", [
    {"system": {"name": "cat_map"}, "pipeline": "spectrum", "bogus": 1},
    {"system": {"name": "cat_map"}, "pipeline": "spectrum", "budgets": {"spectrum": {"n": -5}}},
    {"system": {"name": "cat_map"}, "pipeline": "spectrum", "budgets": {"spectrum": {"n": 0}}},
    {"system": {"name": "cat_map"}, "pipeline": "spectrum", "seed": -1},
    {"system": {"name": "cat_map"}, "pipeline": "nope"},
    {"system": {"name": "no_such_system"}, "pipeline": "spectrum"},
    {"system": {"name": "cat_map", "custom": ESCAPING["custom"]}, "pipeline": "spectrum"},
    {"system": {"name": "cat_map", "norm": "l3"}, "pipeline": "spectrum"},
    {"pipeline": "spectrum"},
])
def test_schema_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_invalid_json_is_config_error():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


_budgets = st.fixed_dictionaries({}, optional={
    p: st.fixed_dictionaries({}, optional={k: st.floats(1e-3, 1e6) for k in keys})
    for p, keys in BUDGET_DEFAULTS.items()})


@settings(max_examples=40)
@given(st.sampled_from(["cat_map", "solenoid", "diag_cocycle"]), st.integers(0, 2 ** 64 - 1), _budgets,
       st.sampled_from(["spectrum", "srb", "entropy"]), st.sampled_from(["l1", "l2", "linf"]))
def test_config_round_trip(name, seed, budgets, pipeline, norm):
    d = {"system": {"name": name, "norm": norm}, "pipeline": pipeline, "seed": seed, "budgets": budgets}
    cfg = ExperimentConfig.from_dict(d)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg and again.hash == cfg.hash
    for p, vals in budgets.items():
        for k, v in vals.items():
            assert cfg.budgets[p][k] == v


def test_hash_changes_with_seed():
    a = ExperimentConfig.from_dict(_spectrum_cfg("x"))
    assert a.hash != a.replace(seed=1).hash


def test_csv_quoting_and_line_ends(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["a", "b"], [['he said "hi"', 0.1], ["x,y", 1e-300], ["é", 3]])
    raw = p.read_bytes()
    assert raw.count(b"\r\n") == 4 and b"\n" not in raw.replace(b"\r\n", b"")
    rows = list(csv.reader(io.StringIO(raw.decode("utf-8"), newline="")))
    assert rows[1] == ['he said "hi"', "0.1"] and rows[2] == ["x,y", "1e-300"] and rows[3] == ["é", "3"]
    assert b'"he said ""hi"""' in raw


def test_canonical_json_sorted():
    assert canonical_json({"b": 1, "a": 2}).index('"a"') < canonical_json({"b": 1, "a": 2}).index('"b"')


def test_spectrum_pipeline_writes_reports(tmp_path):
    out = tmp_path / "out"
    assert main(["spectrum", "--config", _write(tmp_path, _spectrum_cfg(out))]) == 0
    rep = json.loads((out / "report.json").read_text())
    cfg = ExperimentConfig.from_dict(_spectrum_cfg(out))
    assert rep["config_hash"] == cfg.hash and rep["artifact_version"] == artifact_version()
    assert rep["result"]["failed"] == []
    rows = list(csv.reader(io.StringIO((out / "spectrum.csv").read_bytes().decode("utf-8"))))
    assert rows[0] == ["index", "exponent", "stderr"] and len(rows) == 3
    ex = sorted(float(r[1]) for r in rows[1:])
    # fair coin between diag(3, 1/3) and diag(2, 1/4)
    assert ex == pytest.approx([-np.log(12) / 2, np.log(6) / 2], abs=0.03)


def test_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "out"
    path = _write(tmp_path, _spectrum_cfg(out, seed=5))
    assert main(["spectrum", "--config", path]) == 0
    first = {f: (out / f).read_bytes() for f in os.listdir(out)}
    assert main(["spectrum", "--config", path]) == 0
    assert first == {f: (out / f).read_bytes() for f in os.listdir(out)}


@pytest.mark.parametrize("argv", [
    ["spectrum", "--seed", "-3"],
    ["spectrum", "--system", "no_such_system"],
    ["spectrum", "--criterion", "1"],
    ["verify", "--criterion", "no_such_criterion"],
])
def test_config_errors_exit_3_without_output(tmp_path, argv):
    out = tmp_path / "out"
    assert main(argv + ["--out", str(out)]) == 3
    assert not out.exists()


def test_bad_config_file_exit_3(tmp_path):
    out = tmp_path / "out"
    bad = _spectrum_cfg(out, budgets={"spectrum": {"n": -1}})
    assert main(["spectrum", "--config", _write(tmp_path, bad)]) == 3
    assert not out.exists()
    assert main(["manifold", "--config", _write(tmp_path, _spectrum_cfg(out), "ok.json")]) == 3
    assert main(["spectrum", "--config", str(tmp_path / "missing.json")]) == 3


def test_pipeline_failure_exit_2_with_provenance(tmp_path):
    out = tmp_path / "out"
    d = {"system": ESCAPING, "pipeline": "spectrum", "output": str(out)}
    assert main(["spectrum", "--config", _write(tmp_path, d)]) == 2
    assert os.listdir(out) == ["report.json"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["result"]["provenance"].startswith("oseledets.")
