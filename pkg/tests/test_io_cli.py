import json
import math
import os

import jsonschema
import numpy as np
import pytest

from twophase.cli import main
from twophase.data import Dataset
from twophase.exceptions import DataError, InputError
from twophase.io import (
    DatasetSchema,
    apply_transforms,
    load_csv,
    quantile_cuts,
    stratified_subsample,
    write_csv,
)
from twophase.schemas import RESULTS_SCHEMA, SIMREPORT_SCHEMA
from twophase.simulation import synthetic_survey

SCHEMA = DatasetSchema("y", ("x",), ("z",), "r")


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------------ loading


def test_load_allows_missing_z_on_phase1_row(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x,z,r\n1.5,0,2.0,1\n0.2,1,,0\n-1,2,0.5,1\n")
    d = load_csv(p, SCHEMA)
    assert d.n == 3 and d.m == 2 and np.isnan(d.z[1, 0])


def test_load_rejects_missing_z_on_phase2_row(tmp_path):
    p = _write(tmp_path / "d.csv", "y,x,z,r\n1.5,0,2.0,1\n0.2,1,,1\n-1,2,0.5,1\n")
    with pytest.raises(DataError, match="row 2") as exc:
        load_csv(p, SCHEMA)
    assert exc.value.row == 2 and exc.value.column == "z"


@pytest.mark.parametrize("text", ["", "y,x,z,r\n", "# only a comment\n"])
def test_empty_file(tmp_path, text):
    with pytest.raises(DataError, match="no data rows"):
        load_csv(_write(tmp_path / "d.csv", text), SCHEMA)


@pytest.mark.parametrize("text,row,col", [
    ("y,x,z,r\n1,abc,2,1\n", 1, "x"),
    ("y,x,z,r\n1,0,2,1\n1,0,2,3\n", 2, "r"),
    ("y,x,z,r\n1,0,2,1\n1,0,2\n", 2, None),
    ("y,x,z,r\n1,0,2,1\n,0,2,1\n", 2, "y"),
    ("y,x,z,r\n1,0,inf,1\n", 1, "z"),
])
def test_located_errors(tmp_path, text, row, col):
    with pytest.raises(DataError) as exc:
        load_csv(_write(tmp_path / "d.csv", text), SCHEMA)
    assert exc.value.row == row and exc.value.column == col


def test_unknown_column(tmp_path):
    with pytest.raises(DataError, match="unknown column") as exc:
        load_csv(_write(tmp_path / "d.csv", "y,x,w,r\n1,0,2,1\n"), SCHEMA)
    assert exc.value.column == "z"


def test_outside_support_is_located(tmp_path):
    schema = DatasetSchema("y", ("x",), ("z",), "r", strata=((None, 0.0), (1.0, None)))
    with pytest.raises(DataError, match="outside") as exc:
        load_csv(_write(tmp_path / "d.csv", "y,x,z,r\n-1,0,2,1\n0.5,0,2,1\n"), schema)
    assert exc.value.row == 2


def test_without_r_column_all_complete(tmp_path):
    d = load_csv(_write(tmp_path / "d.csv", "y,x,z\n1,0,2\n2,1,3\n"), DatasetSchema("y", ("x",), ("z",)))
    assert d.m == 2


def test_schema_validation():
    with pytest.raises(InputError):
        DatasetSchema("y", ("y",))
    with pytest.raises(InputError):
        DatasetSchema("y", ("x",), transforms={"q": "log"})
    with pytest.raises(InputError):
        DatasetSchema("y", ("x",), transforms={"x": "cube"})


def test_round_trip_bit_exact(tmp_path, rng):
    n = 200
    y = rng.normal(size=n) * 10.0 ** rng.integers(-8, 8, size=n)
    x = np.round(rng.normal(size=(n, 2)), int(rng.integers(1, 14)))
    z = rng.normal(size=(n, 1))
    r = (rng.random(n) < 0.5).astype(int)
    d = Dataset.from_arrays(y, x, z, r, x_names=("a", "b"), z_names=("c",))
    p = tmp_path / "rt.csv"
    write_csv(d, p, comments=["hello"])
    e = load_csv(p, DatasetSchema("y", ("a", "b"), ("c",), "r"))
    assert np.array_equal(d.y, e.y) and np.array_equal(d.x, e.x) and np.array_equal(d.r, e.r)
    assert np.array_equal(d.z, e.z, equal_nan=True)


def test_round_trip_decimal_literals(tmp_path, rng):
    lits = [f"{v:.{k}g}" for v, k in zip(rng.normal(size=100) * 1e3, rng.integers(1, 16, size=100))]
    p = _write(tmp_path / "lit.csv", "y,x\n" + "".join(f"{s},0\n" for s in lits))
    d = load_csv(p, DatasetSchema("y", ("x",)))
    write_csv(d, tmp_path / "out.csv")
    e = load_csv(tmp_path / "out.csv", DatasetSchema("y", ("x",), (), "r"))
    assert np.array_equal(e.y, np.array([float(s) for s in lits]))


# ------------------------------------------------------------------ transforms


def _survey_like(rng, n=300):
    y = np.exp(rng.normal(4.8, 0.1, n))
    x = np.column_stack([np.exp(rng.normal(3.3, 0.2, n)), rng.uniform(20, 80, n)])
    z = rng.normal(size=(n, 1))
    r = (rng.random(n) < 0.5).astype(int)
    return Dataset.from_arrays(y, x, z, r, y_name="sbp", x_names=("bmi", "age"), z_names=("salt",))


def test_transforms_and_inverse(rng):
    d = _survey_like(rng)
    schema = DatasetSchema("sbp", ("bmi", "age"), ("salt",), "r",
                           transforms={"sbp": ["log", "standardize_unit_variance"], "bmi": "log",
                                       "age": "standardize", "salt": "standardize_unit_variance"})
    t, rec = apply_transforms(d, schema)
    assert abs(t.y.mean()) < 1e-12 and t.y.std(ddof=1) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(t.x[:, 0], np.log(d.x[:, 0]))
    assert abs(t.x[:, 1].mean()) < 1e-12
    zo = t.z[t.r == 1, 0]
    assert abs(zo.mean()) < 1e-12
    for name, orig, new in [("sbp", d.y, t.y), ("bmi", d.x[:, 0], t.x[:, 0]), ("age", d.x[:, 1], t.x[:, 1]),
                            ("salt", d.z[d.r == 1, 0], zo)]:
        back = rec.inverse(name, new)
        assert np.max(np.abs(back / orig - 1)) < 1e-10
    assert set(rec.to_dict()) == {"sbp", "bmi", "age", "salt"}


def test_log_of_nonpositive_is_located(rng):
    d = _survey_like(rng)
    x = d.x.copy()
    x[4, 1] = -1.0
    d = Dataset.from_arrays(d.y, x, d.z, d.r, y_name="sbp", x_names=("bmi", "age"), z_names=("salt",))
    with pytest.raises(DataError, match="non-positive") as exc:
        apply_transforms(d, DatasetSchema("sbp", ("bmi", "age"), transforms={"age": "log"}))
    assert exc.value.row == 5 and exc.value.column == "age"


def test_constant_column_cannot_be_standardized():
    d = Dataset.from_arrays([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])
    with pytest.raises(DataError, match="zero SD"):
        apply_transforms(d, DatasetSchema("y", ("x0",), transforms={"x0": "standardize"}))


def test_standardize_once(rng):
    d = Dataset.from_arrays(rng.normal(size=10), rng.normal(size=10))
    with pytest.raises(DataError, match="once"):
        apply_transforms(d, DatasetSchema("y", ("x0",), transforms={"x0": ["standardize", "standardize"]}))


# ------------------------------------------------------------------ subsampling


def test_subsample_deterministic_and_masked():
    d = synthetic_survey(n=2000, seed=1)
    a = stratified_subsample(d, seed=5)
    b = stratified_subsample(d, seed=5)
    c = stratified_subsample(d, seed=6)
    assert np.array_equal(a.dataset.r, b.dataset.r) and not np.array_equal(a.dataset.r, c.dataset.r)
    assert np.all(np.isnan(a.dataset.z[a.dataset.r == 0]))
    assert a.counts["phase2"] == a.dataset.m


def test_subsample_all_tails():
    d = synthetic_survey(n=1000, seed=2)
    res = stratified_subsample(d, alpha=(1.0, 1.0))
    lo, hi = res.cuts
    tails = (d.y <= lo) | (d.y > hi)
    assert np.array_equal(res.dataset.r == 1, tails)
    assert res.counts["selected_per_stratum"][1] == 0


def test_subsample_errors():
    d = Dataset.from_arrays(np.r_[np.zeros(50), np.arange(10.0)], np.zeros(60))
    with pytest.raises(DataError, match="tied"):
        quantile_cuts(d.y, (0.25, 0.75))
    with pytest.raises(DataError, match="empty stratum|tied"):
        stratified_subsample(d)
    full = synthetic_survey(n=200, seed=0)
    with pytest.raises(InputError):
        stratified_subsample(full, alpha=(0.4,))
    with pytest.raises(InputError):
        stratified_subsample(full, alpha=(0.4, 1.2))
    incomplete = stratified_subsample(full, seed=1).dataset
    with pytest.raises(DataError, match="complete"):
        stratified_subsample(incomplete)


def test_subsample_expected_size():
    d = synthetic_survey(n=6453, seed=0)
    res = stratified_subsample(d, (0.25, 0.75), (0.4, 0.4), seed=0)
    k = sum(res.counts["per_stratum"][s] for s in res.sampled)
    assert abs(res.dataset.m - 0.4 * k) < 3 * math.sqrt(k * 0.4 * 0.6)


# ------------------------------------------------------------------ CLI


@pytest.fixture(scope="module")
def survey_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("survey")
    write_csv(synthetic_survey(n=3000, seed=4), root / "complete.csv")
    data = {"path": str(root / "complete.csv"), "y": "sbp", "x": ["bmi", "age"],
            "z": ["sodium", "satfat", "saltprep"], "r": "r",
            "transforms": {"sbp": ["log", "standardize_unit_variance"], "bmi": "standardize_unit_variance",
                           "age": "standardize_unit_variance", "sodium": "standardize_unit_variance",
                           "satfat": "standardize_unit_variance", "saltprep": "standardize_unit_variance"}}
    sub = {"mode": "subsample", "data": data, "strata_quantiles": [0.25, 0.75], "alpha": [0.4, 0.4], "seed": 3}
    (root / "sub.json").write_text(json.dumps(sub))
    assert main(["subsample", "--config", str(root / "sub.json"), "--out-dir", str(root / "sub")]) == 0
    return root


def _fit_config(root, estimators, **extra):
    cfg = {
        "mode": "fit",
        "data": {"path": str(root / "sub" / "twophase.csv"), "y": "sbp", "x": ["bmi", "age"],
                 "z": ["sodium", "satfat", "saltprep"], "r": "r"},
        "outcome": {"family": "linear_gaussian", "x": ["bmi", "age"], "z": ["sodium", "satfat", "saltprep"]},
        "working": {"family": "linear_gaussian", "x": ["bmi", "age"]},
        "selection": {"form": "stratified", "strata_quantiles": [0.25, 0.75]},
        "selection_ps": {"x": "bmi", "x_quantiles": [0.5]},
        "estimators": estimators,
        "multimodal_check": False,
        **extra,
    }
    path = root / f"fit_{'_'.join(estimators)}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_subsample_outputs(survey_files):
    meta = json.loads((survey_files / "sub" / "subsample.json").read_text())
    assert meta["seed"] == 3 and meta["support"][0][0] is None and meta["support"][1][1] is None
    assert "out_dir" not in meta["config"]
    first = (survey_files / "sub" / "twophase.csv").read_text().splitlines()[0]
    assert first.startswith("# config:")


def test_fit_single_estimator(survey_files, tmp_path):
    cfg = _fit_config(survey_files, ["cml_pihat"])
    assert main(["fit", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "results.json").read_text())
    jsonschema.validate(report, RESULTS_SCHEMA)
    lines = [ln for ln in (tmp_path / "results.csv").read_text().splitlines() if not ln.startswith("#")]
    assert lines[0].split(",")[:2] == ["method", "statistic"]
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["cml_pihat", "Estimate"], ["cml_pihat", "S.E."],
                                                      ["cml_pihat", "p-value"]]


def test_fit_el5_improves_on_cml(survey_files, tmp_path):
    cfg = _fit_config(survey_files, ["cml_pihat", "el5", "el5_ps", "sw"])
    assert main(["fit", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "results.json").read_text())["results"]
    assert all(r["status"] == "ok" for r in res.values())
    names = res["el5"]["parameters"]
    for col in ("bmi", "age"):
        j = next(k for k, nm in enumerate(names) if col in nm)
        assert res["el5"]["se"][j] <= res["cml_pihat"]["se"][j]


def test_fit_partial_and_total_failure(survey_files, tmp_path):
    cfg = _fit_config(survey_files, ["el4", "cml_pihat"])
    assert main(["fit", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "results.json").read_text())["results"]
    assert res["el4"]["status"] == "failed" and res["el4"]["error_type"] == "RankDeficiencyError"
    cfg = _fit_config(survey_files, ["el4"])
    assert main(["fit", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 4


def test_exit_codes(survey_files, tmp_path):
    assert main(["fit", "--config", str(tmp_path / "missing.json")]) == 2
    bad = _write(tmp_path / "bad.json", "{not json")
    assert main(["fit", "--config", str(bad)]) == 2
    wrong = _write(tmp_path / "wrong.json", json.dumps({"mode": "fit", "data": {}}))
    assert main(["fit", "--config", str(wrong)]) == 2
    cfg = json.loads(_fit_config(survey_files, ["cml_pihat"]).read_text())
    assert main(["simulate", "--config", str(_write(tmp_path / "m.json", json.dumps(cfg)))]) == 2
    cfg["estimators"] = ["nope"]
    assert main(["fit", "--config", str(_write(tmp_path / "u.json", json.dumps(cfg)))]) == 2
    cfg["estimators"] = ["cml_pihat"]
    cfg["data"]["path"] = str(tmp_path / "absent.csv")
    assert main(["fit", "--config", str(_write(tmp_path / "a.json", json.dumps(cfg)))]) == 3
    broken = _write(tmp_path / "broken.csv", "sbp,bmi,age,sodium,satfat,saltprep,r\n1,2,3,,5,6,1\n")
    cfg["data"]["path"] = str(broken)
    assert main(["fit", "--config", str(_write(tmp_path / "c.json", json.dumps(cfg)))]) == 3


def test_validate_command(survey_files, capsys):
    cfg = _fit_config(survey_files, ["cml_pihat"])
    assert main(["validate", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == "ok"


def _simulate(tmp_path, name, *flags):
    out = tmp_path / name
    code = main(["simulate", "--preset", "table3", "--replications", "2", "--estimators", "cml_pihat,sw",
                 "--seed", "9", "--out-dir", str(out), *flags])
    return code, out


def test_simulate_byte_identical(tmp_path):
    cfg = _write(tmp_path / "s.json", json.dumps({"mode": "simulate", "scenario": {"preset": "table3", "n": 300}}))
    outs = []
    for k, threads in enumerate(["1", "1", "2"]):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "--config", str(cfg), "--replications", "2", "--estimators", "cml_pihat,sw",
                     "--seed", "9", "--out-dir", str(out), "--threads", threads]) == 0
        outs.append(out)
    for f in ("simreport.json", "simreport.csv"):
        blobs = {(o / f).read_bytes() for o in outs}
        assert len(blobs) == 1
    report = json.loads((outs[0] / "simreport.json").read_text())
    jsonschema.validate(report, SIMREPORT_SCHEMA)
    assert report["run_config"]["seed"] == 9 and report["config"]["master_seed"] == 9
    assert report["config"]["design"] == "linear_expensive"


def test_simulate_single_replication_reports_na(tmp_path):
    cfg = _write(tmp_path / "s.json", json.dumps({"mode": "simulate", "scenario": {"preset": "table3", "n": 300},
                                                   "replications": 1, "estimators": ["cml_pihat"]}))
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "simreport.json").read_text())
    assert report["estimators"]["cml_pihat"]["ese"] is None
    assert "(NA)" in (tmp_path / "simreport.csv").read_text()


def test_simulate_config_errors(tmp_path):
    bad = _write(tmp_path / "s.json", json.dumps({"mode": "simulate", "scenario": {"preset": "table7"}}))
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad = _write(tmp_path / "t.json", json.dumps({"mode": "simulate", "scenario": {"preset": "table3", "n": 10}}))
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["simulate", "--out-dir", str(tmp_path)]) == 2


def test_subsample_byte_identical(survey_files, tmp_path):
    cfg = survey_files / "sub.json"
    for k in range(2):
        assert main(["subsample", "--config", str(cfg), "--out-dir", str(tmp_path / f"s{k}")]) == 0
    for f in ("twophase.csv", "subsample.json"):
        assert (tmp_path / "s0" / f).read_bytes() == (tmp_path / "s1" / f).read_bytes()
    assert (tmp_path / "s0" / "twophase.csv").read_bytes() == (survey_files / "sub" / "twophase.csv").read_bytes()
