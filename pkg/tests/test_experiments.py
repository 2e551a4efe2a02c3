import csv
import io
import json

import numpy as np
import pytest

from holokit import cli
from holokit.domain_core import domain_to_dict, preset_domain
from holokit.errors import PreconditionError
from holokit.experiments import (EXIT_ASSERT, EXIT_BUDGET, EXIT_OK, ExperimentConfig, approach_points,
                                 emit_report, fr_pairs, herbort_pairs, parse_domain_spec,
                                 parse_point, parse_sequence, render_csv, render_json,
                                 run_experiment, version_string)


def cfg(**kw):
    base = dict(kind="scale", domain="preset:egg:2", seed=0, sequence="normal:6")
    base.update(kw)
    return ExperimentConfig(**base)


# parsing -----------------------------------------------------------------------

def test_parse_preset_and_json(tmp_path):
    D = parse_domain_spec("preset:ball:2")
    assert D.name == "ball:2" and D.n == 2
    doc = domain_to_dict(preset_domain("thullen_model", 2))
    path = tmp_path / "thullen.json"
    path.write_text(json.dumps(doc))
    T = parse_domain_spec(str(path))
    assert T.class_tag == "PolynomialModel" and T.declared_type == 4
    assert parse_domain_spec(json.dumps(doc)).class_tag == "PolynomialModel"


def test_parse_errors():
    bad = {"n": 1, "class": "Generic", "base_point": [[0, 0]],
           "terms": [{"re": 1, "z": [2], "zbar": [0]}, {"re": -1, "z": [0], "zbar": [0]}]}
    with pytest.raises(PreconditionError, match=r"\(\(2,\), \(0,\)\)"):
        parse_domain_spec(json.dumps(bad))
    for text in ("preset:", "preset:ball:x", "preset:torus", "/no/such/file.json"):
        with pytest.raises(PreconditionError):
            parse_domain_spec(text)


def test_parse_point_and_sequence():
    assert np.array_equal(parse_point("0.1+0.2j, -1"), np.array([0.1 + 0.2j, -1]))
    mode, ds = parse_sequence("normal:3")
    assert mode == "normal" and ds == [0.05, 0.025, 0.0125]
    assert parse_sequence("tangential-mix:1e-1,1e-2")[1] == [0.1, 0.01]
    for text in ("sideways:3", "normal:", "normal:0", "normal:2,1.5"):
        with pytest.raises(PreconditionError):
            parse_sequence(text)
    with pytest.raises(PreconditionError):
        parse_point("1,abc")


def test_config_validation_lists_every_problem():
    with pytest.raises(PreconditionError) as info:
        cfg(kind="dance", seed=-1, N=1, M=8, eta=1.0).validate()
    msg = str(info.value)
    for word in ("kind", "seed", "N must", "M must", "eta"):
        assert word in msg


# sequences and pairs --------------------------------------------------------------

def test_approach_points_sit_at_the_requested_distance():
    from holokit.domain_core import boundary_distance
    B = preset_domain("ball", 2)
    base = np.array([0, 1.0 + 0j])
    for mode in ("normal", "tangential-mix"):
        for p, d in zip(approach_points(B, base, mode, [1e-1, 1e-2]), [1e-1, 1e-2]):
            assert boundary_distance(B, p).distance == pytest.approx(d, rel=1e-6)


def test_pairs_are_interior_and_seeded():
    E = preset_domain("egg", 2)
    base = np.array([0, 1.0 + 0j])
    a = herbort_pairs(E, base, 20, 7)
    assert len(a) == 20 and all(E.values(p) < 0 and E.values(q) < 0 for p, q in a)
    b = herbort_pairs(E, base, 20, 7)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    P = preset_domain("perturbed_ball", 16)
    kinds = [k for k, p, q in fr_pairs(P)]
    assert "far" in kinds and "near" in kinds


# reports ----------------------------------------------------------------------

def test_report_formatting():
    rows = [{"a": 1, "b": 0.1, "c": np.array([1 - 2j, -0.0])}, {"a": 2, "d": float("inf")}]
    text = render_csv(rows)
    got = list(csv.reader(io.StringIO(text)))
    assert got[0] == ["a", "b", "c", "d"]
    assert got[1] == ["1", "0.10000000000000001", "1-2j 0+0j", ""]
    assert got[2] == ["2", "", "", "inf"]
    doc = json.loads(render_json(rows, {"seed": 3}))
    assert doc["config"] == {"seed": 3} and doc["version"].startswith(version_string()[:3])
    with pytest.raises(PreconditionError):
        render_csv([])
    with pytest.raises(PreconditionError):
        emit_report([], "unused.csv")


def test_scale_run_is_deterministic(tmp_path):
    out = tmp_path / "scale"
    r1 = run_experiment(cfg(out=str(out)))
    first = {p.suffix: p.read_bytes() for p in r1.files if not p.name.endswith("timing.csv")}
    r2 = run_experiment(cfg(out=str(out)))
    second = {p.suffix: p.read_bytes() for p in r2.files if not p.name.endswith("timing.csv")}
    assert r1.exit_code == EXIT_OK and len(r1.rows) == 6
    assert first == second
    doc = json.loads(first[".json"])
    assert doc["config"]["seed"] == 0 and doc["status"] == "ok"
    limit = json.loads(r1.rows[-1]["limit"])
    quartic = [t for t in limit if t["z"] == [2, 0] and t["zbar"] == [2, 0]]
    assert quartic and quartic[0]["re"] == pytest.approx(1, abs=1e-6)


def test_exit_codes():
    res = run_experiment(cfg(kind="metric", domain="preset:ball:2", points=["1.5,0"], direction="1,0"))
    assert res.exit_code == EXIT_ASSERT and "outside" in res.message
    res = run_experiment(cfg(kind="corner", domain="preset:polydisc:2", budget=1e-9,
                             sequence="normal:1e-1,1e-2"))
    assert res.exit_code == EXIT_BUDGET
    assert len(res.rows) == 1  # the row finished before the clock check is kept


def test_partial_rows_are_flushed(tmp_path):
    out = tmp_path / "partial"
    res = run_experiment(cfg(kind="corner", domain="preset:polydisc:2", budget=1e-9,
                             sequence="normal:1e-1,1e-2", out=str(out)))
    doc = json.loads(out.with_suffix(".json").read_text())
    assert doc["status"].startswith("aborted (3)")
    assert len(doc["rows"]) == len(res.rows) == 1


def test_corner_rows():
    res = run_experiment(cfg(kind="corner", domain="preset:polydisc:2", sequence="normal:1e-1,1e-3"))
    assert res.exit_code == EXIT_OK
    assert all(r["exhaustion"] and r["roundtrip"] <= 1e-10 for r in res.rows)


# command line -------------------------------------------------------------------

def test_cli_metric_and_validate(capsys):
    code = cli.main(["metric", "--domain", "preset:ball:2", "--seed", "0", "--point", "0,0",
                     "--dir", "1,0"])
    out = capsys.readouterr().out.splitlines()
    assert code == EXIT_OK and out[0].startswith("id,point,dir,FK,FK_bound,FC,FC_bound")
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert float(row["exact"]) == 1.0 and row["FK_bound"] == "UpperBound"
    assert 1.0 <= float(row["FK"]) <= 1.05
    assert cli.main(["validate", "--domain", "preset:egg:2"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["class"] == "FiniteType2D"
    assert cli.main(["validate", "--domain", '{"n": 2}']) == EXIT_ASSERT
    assert "missing" in capsys.readouterr().err


def test_cli_outside_point_exits_2(capsys):
    code = cli.main(["metric", "--domain", "preset:ball:2", "--seed", "0", "--point", "2,0",
                     "--dir", "1,0"])
    assert code == EXIT_ASSERT
    assert "outside" in capsys.readouterr().err


def test_cli_requires_seed():
    with pytest.raises(SystemExit):
        cli.main(["metric", "--domain", "preset:ball:2"])
