import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trajmix import cli
from trajmix.manifest import sha256_text
from trajmix.simulate import CovariateGenerator, GeneratorConfig, GroupCurve, curve_coefficients

from conftest import GRID


def toy_config(n=50, seed=1):
    return GeneratorConfig(
        n_subjects=n,
        grid=GRID,
        groups=(GroupCurve("low", 0.5, curve_coefficients(GRID, (10.0, 10.1, 10.3), 1)),
                GroupCurve("high", 0.5, curve_coefficients(GRID, (12.2, 11.8, 11.4), 1))),
        sigma=0.3,
        seed=seed,
        missingness={"mode": "mcar", "rates": [0.05, 0.1, 0.1]},
        covariates=(
            CovariateGenerator("education", "categorical", ("low", "high"), (0.5, 0.5), reference="high"),
            CovariateGenerator("center", "categorical", ("A", "B"), (0.5, 0.5), reference="A"),
            CovariateGenerator("x", "continuous", mean=0.0, sd=1.0),
        ),
        covariate_missing_rate=0.02,
        name="toy",
    )


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def toy(tmp_path):
    cfg = tmp_path / "toy.json"
    cfg.write_text(toy_config().to_json())
    assert run("simulate", "--config", cfg, "--seed", 1, "-o", tmp_path / "y.csv",
               "--covariates", tmp_path / "cov.csv", "--labels", tmp_path / "labels.csv") == 0
    return tmp_path


def _pipeline(d: Path, out: Path):
    out.mkdir()
    assert run("fit", d / "y.csv", "--k", 2, "--degree", 1, "--seed", 3, "--starts", 4, "-o", out / "model.json") == 0
    assert run("diagnose", d / "y.csv", "--model", out / "model.json", "-o", out / "adequacy.json") == 0
    assert run("assign", d / "y.csv", "--model", out / "model.json", "-o", out / "assign.csv") == 0
    assert run("regress", "--assignments", out / "assign.csv", "--model", out / "model.json",
               "--covariates", d / "cov.csv", "--schema", d / "cov.csv.schema.json",
               "-o", out / "or.csv", "--json", out / "or.json", "--screening", out / "screen.csv") == 0
    assert run("report", d / "y.csv", "--model", out / "model.json", "--covariates", d / "cov.csv",
               "--schema", d / "cov.csv.schema.json", "--outdir", out / "report") == 0


def _check_manifest(path: Path):
    man = json.loads(path.read_text())
    for role, entry in man["outputs"].items():
        text = Path(entry["path"]).read_text()
        assert sha256_text(text) == entry["sha256"], role
        if entry["path"].endswith(".json"):
            assert json.loads(text)["run_id"] == man["run_id"]
    return man


def test_full_pipeline_cross_references(toy):
    out = toy / "run"
    _pipeline(toy, out)
    model = json.loads((out / "model.json").read_text())
    assert model["spec"]["n_groups"] == 2
    fit_man = _check_manifest(out / "model.json.manifest.json")
    assign_man = _check_manifest(out / "assign.csv.manifest.json")
    # downstream stages record the digest of what they consumed
    assert assign_man["inputs"]["model"]["sha256"] == fit_man["outputs"]["model"]["sha256"]
    reg_man = _check_manifest(out / "or.csv.manifest.json")
    assert reg_man["inputs"]["assignments"]["sha256"] == assign_man["outputs"]["assignments"]["sha256"]
    rep = _check_manifest(out / "report" / "manifest.json")
    assert {"band_group1", "band_group2", "adequacy", "assignments", "regression_table"} <= set(rep["outputs"])
    assert (out / "report" / "assignments.csv").read_text() == (out / "assign.csv").read_text()
    band = np.genfromtxt(out / "report" / "band_group1.csv", delimiter=",", names=True)
    assert band["age"][0] == 2.0 and band["age"][-1] == 5.5 and len(band) == 71
    assert np.all(band["band_lo"] <= band["mean"]) and np.all(band["mean"] <= band["band_hi"])
    reg = json.loads((out / "or.json").read_text())
    assert reg["global_test"] == "lrt"
    assert set(reg["forced_factors"]) == {"education", "center"}


def test_reruns_are_byte_identical(toy):
    _pipeline(toy, toy / "a")
    _pipeline(toy, toy / "b")
    files = sorted(p.relative_to(toy / "a") for p in (toy / "a").rglob("*")
                   if p.is_file() and not p.name.endswith("manifest.json"))
    assert len(files) >= 12
    for f in files:
        assert (toy / "a" / f).read_bytes() == (toy / "b" / f).read_bytes(), f
    ma = json.loads((toy / "a" / "model.json.manifest.json").read_text())
    mb = json.loads((toy / "b" / "model.json.manifest.json").read_text())
    assert ma["run_id"] == mb["run_id"]


def test_single_group_constant_model(toy):
    out = toy / "m1.json"
    assert run("fit", toy / "y.csv", "--k", 1, "--degree", 0, "--seed", 0, "-o", out) == 0
    from trajmix import io as tio
    cohort = tio.read_long_csv(toy / "y.csv", GRID)
    y = cohort.values[cohort.mask & (cohort.n_observed >= 2)[:, None]]
    m = json.loads(out.read_text())
    assert m["groups"][0]["coefficients_raw_age"][0] == pytest.approx(y.mean(), rel=1e-12)


def test_missing_seed_is_recorded(toy):
    out = toy / "m.json"
    assert run("fit", toy / "y.csv", "--k", 1, "--degree", 0, "-o", out) == 0
    man = json.loads((toy / "m.json.manifest.json").read_text())
    assert isinstance(man["seed"], int) and man["config"]["seed"] == man["seed"]


def test_schema_errors_exit_2(toy, capsys):
    bad = toy / "bad.csv"
    bad.write_text("subject_id,age_years,value\na,4,11\n")
    assert run("fit", bad, "--k", 1, "--degree", 0, "--seed", 0, "-o", toy / "x.json") == 2
    assert run("fit", toy / "nope.csv", "--k", 1, "-o", toy / "x.json") == 2
    assert run("fit", toy / "y.csv", "--k", 2, "--degrees", "1,1,1", "-o", toy / "x.json") == 2
    assert run("diagnose", toy / "y.csv", "--model", toy / "labels.csv") == 2
    assert "error" in capsys.readouterr().err


def test_estimation_error_exits_3(tmp_path):
    # every subject with flag=yes is in group 2: quasi-complete separation
    n = 40
    ids = [f"s{i:02d}" for i in range(n)]
    groups = [2] * 6 + [1, 2] * 17
    (tmp_path / "a.csv").write_text("subject_id,group\n" + "".join(f"{s},{g}\n" for s, g in zip(ids, groups)))
    flags = ["yes"] * 6 + ["no"] * 34
    x = np.linspace(-1, 1, n)
    (tmp_path / "c.csv").write_text("subject_id,flag,x\n" + "".join(
        f"{s},{f},{float(v)!r}\n" for s, f, v in zip(ids, flags, x)))
    (tmp_path / "s.json").write_text(json.dumps({"flag": {"type": "categorical", "levels": ["no", "yes"]},
                                                 "x": {"type": "continuous"}}))
    code = run("regress", "--assignments", tmp_path / "a.csv", "--reference", 1, "--covariates",
               tmp_path / "c.csv", "--schema", tmp_path / "s.json", "--screen-alpha", 1.0,
               "-o", tmp_path / "or.csv")
    assert code == 3


def test_strict_adequacy_exits_4(tmp_path):
    rng = np.random.default_rng(0)
    rows = [f"s{i:03d},{a},{float(v)!r}\n" for i in range(80) for a, v in zip(GRID, rng.normal(11, 1, 3))]
    (tmp_path / "y.csv").write_text("subject_id,age_years,value\n" + "".join(rows))
    args = ["fit", tmp_path / "y.csv", "--k", 3, "--degree", 0, "--seed", 0, "--starts", 3, "-o", tmp_path / "m.json"]
    assert run(*args) == 0
    assert run(*args, "--strict") == 4
    assert run("diagnose", tmp_path / "y.csv", "--model", tmp_path / "m.json", "--strict", "--format", "table",
               "-o", tmp_path / "t.txt") == 4
    assert "FAIL" in (tmp_path / "t.txt").read_text()


def test_durations_command(tmp_path, capsys):
    src = tmp_path / "clock.csv"
    src.write_text("subject_id,age_years,bedtime,waketime\na,2,21:00,08:06\nb,2,21:00,\nc,2,9pm,07:00\n")
    assert run("durations", src, "-o", tmp_path / "d.csv", "--errors", tmp_path / "e.csv") == 0
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["subject_id,age_years,value", "a,2,11.10", "b,2,", "c,2,"]
    errs = (tmp_path / "e.csv").read_text().splitlines()
    assert len(errs) == 2 and errs[1].startswith("4,c,")
    assert run("durations", src, "-o", tmp_path / "d.csv", "--strict") == 2
    assert "line 4" in capsys.readouterr().err


def test_stdin_stdout_piping(tmp_path):
    cmd = [sys.executable, "-m", "trajmix.cli"]
    cfg = tmp_path / "toy.json"
    cfg.write_text(toy_config(n=60).to_json())
    sim = subprocess.run(cmd + ["simulate", "--config", str(cfg), "--seed", "2"], capture_output=True, check=True)
    assert sim.stdout.startswith(b"subject_id,age_years,value\n")
    assert json.loads(sim.stderr)["command"] == "simulate"  # manifest goes to stderr when output is stdout
    fitted = subprocess.run(cmd + ["search", "--k", "1..3", "--seed", "2", "--starts", "3"],
                            input=sim.stdout, capture_output=True, check=True)
    model = json.loads(fitted.stdout)
    assert model["spec"]["n_groups"] == 2
    assert model["run_id"] == json.loads(fitted.stderr)["run_id"]
    again = subprocess.run(cmd + ["search", "--k", "1..3", "--seed", "2", "--starts", "3"],
                           input=sim.stdout, capture_output=True, check=True)
    assert again.stdout == fitted.stdout


@pytest.mark.parametrize("text,expected", [("2..5", [2, 3, 4, 5]), ("2,4", [2, 4]), ("3", [3])])
def test_parse_k(text, expected):
    assert cli.parse_k(text) == expected


def test_flag_parsers():
    assert cli.parse_band("11:11.5") == (11.0, 11.5)
    assert cli.parse_names("none") == ()
    assert cli.parse_names("a,b") == ("a", "b")
    assert cli.parse_degrees("2,1,1") == (2, 1, 1)
    for fn, bad in [(cli.parse_k, "5..2"), (cli.parse_band, "12:11"), (cli.parse_degrees, "1,x")]:
        with pytest.raises(Exception):
            fn(bad)
