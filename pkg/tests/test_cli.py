import json
import subprocess
import sys

import pytest

from gecolab import __version__
from gecolab.cli import main
from gecolab.experiment import load_config, run_config, validate_config

FIXED_POINTS = """
kind = "fixed-points"
seed = 7

[dataset]
kind = "gaussian-blobs"
n = 1

[grid]
resolution = 4

[iteration]
beta = 0.1
"""

SWEEP = """
kind = "phase-sweep"
seed = 3

[dataset]
kind = "gaussian-blobs"
n = 30

[grid]
resolution = 6

[iteration]
max_iter = 400

[sweep]
betas = [0.001, 0.01, 0.1, 1.0]
"""

GECO = """
kind = "geco-train"
seed = 1

[dataset]
kind = "micro-bars"
n = 12

[model]
hidden = [8, 8]

[train]
steps = 20

[[constraints]]
kind = "RE"
kappa = 0.1

[[constraints]]
kind = "pNCC"
kappa = 0.5
patch = 4
stride = 4
"""


def _write(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_version(capsys):
    code, out, _ = _run(["version"], capsys)
    assert code == 0 and out.strip() == __version__


def test_console_script_entry_point(tmp_path):
    cfg = _write(tmp_path, FIXED_POINTS)
    proc = subprocess.run(
        [sys.executable, "-m", "gecolab.cli", "run", cfg, "--output", tmp_path / "out"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["kind"] == "fixed-points"


def test_minimal_fixed_points_single_point(tmp_path, capsys):
    cfg = _write(tmp_path, FIXED_POINTS)
    code, _, err = _run(["run", cfg, "--output", tmp_path / "out"], capsys)
    assert code == 0, err
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["summary"]["converged"] is True
    assert manifest["summary"]["cluster_count"] == 1
    assert manifest["seed"] == 7 and manifest["version"] == __version__


@pytest.mark.parametrize("text", [FIXED_POINTS, SWEEP, GECO], ids=["fixed-points", "phase-sweep", "geco-train"])
def test_reruns_are_byte_identical_and_manifest_complete(tmp_path, text):
    cfg = load_config(_write(tmp_path, text))
    first = run_config(cfg, tmp_path / "a")
    second = run_config(cfg, tmp_path / "b")
    assert [f["sha256"] for f in first.files] == [f["sha256"] for f in second.files]
    for out, manifest in ((tmp_path / "a", first), (tmp_path / "b", second)):
        listed = {f["name"] for f in manifest.files}
        assert {p.name for p in out.iterdir()} == listed | {"manifest.json"}
    # rerunning into the same directory replaces the earlier artifacts
    third = run_config(cfg, tmp_path / "a")
    assert [f["sha256"] for f in third.files] == [f["sha256"] for f in first.files]


def test_phase_sweep_outputs(tmp_path):
    manifest = run_config(load_config(_write(tmp_path, SWEEP)), tmp_path / "s")
    names = {f["name"] for f in manifest.files}
    assert {"sweep.csv", "critical.csv"} <= names
    header = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[0]
    assert header.startswith("beta,")


def test_output_root_environment(tmp_path, monkeypatch, capsys):
    cfg = _write(tmp_path, FIXED_POINTS, "tiny.toml")
    monkeypatch.setenv("GECOLAB_OUTPUT_ROOT", str(tmp_path / "root"))
    code, _, err = _run(["run", cfg], capsys)
    assert code == 0, err
    assert (tmp_path / "root" / "tiny" / "manifest.json").exists()


def test_validate_valid_config(tmp_path, capsys):
    code, out, _ = _run(["validate", _write(tmp_path, SWEEP)], capsys)
    assert code == 0 and out == ""


def test_non_increasing_betas_give_one_diagnostic(tmp_path):
    text = SWEEP.replace("[0.001, 0.01, 0.1, 1.0]", "[0.001, 0.1, 0.01, 1.0]")
    diags = validate_config(load_config(_write(tmp_path, text)))
    assert len(diags) == 1 and "increasing" in diags[0]


def test_nonpositive_kappa_names_the_field(tmp_path, capsys):
    text = GECO.replace("kappa = 0.1", "kappa = 0.0")
    path = _write(tmp_path, text)
    diags = validate_config(load_config(path))
    assert len(diags) == 1 and "kappa" in diags[0]
    code, out, _ = _run(["validate", path], capsys)
    assert code == 3 and "kappa" in out


def test_parse_error_reports_position(tmp_path, capsys):
    path = _write(tmp_path, 'kind = "fixed-points"\nseed = = 3\n')
    code, _, err = _run(["validate", path], capsys)
    record = json.loads(err)
    assert code == 2 and record["error"] == "parse-error"
    assert record["line"] == 2 and record["column"] is not None


@pytest.mark.parametrize(
    "text, code, error",
    [
        (FIXED_POINTS.replace('"fixed-points"', '"bogus"'), 4, "unknown-kind"),
        (FIXED_POINTS.replace("seed = 7\n", ""), 3, "invalid-config"),
        (FIXED_POINTS.replace("[grid]\nresolution = 4\n", ""), 3, "invalid-config"),
    ],
)
def test_error_records_and_codes(tmp_path, capsys, text, code, error):
    rc, _, err = _run(["run", _write(tmp_path, text), "--output", tmp_path / "o"], capsys)
    record = json.loads(err)
    assert rc == code and record["error"] == error and record["code"] == code


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc, _, err = _run(["run", _write(tmp_path, FIXED_POINTS), "--output", blocker / "sub"], capsys)
    assert rc == 5 and json.loads(err)["error"] == "unwritable-output"
    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / "notes.txt").write_text("mine")
    rc, _, err = _run(["run", _write(tmp_path, FIXED_POINTS), "--output", foreign], capsys)
    assert rc == 5 and (foreign / "notes.txt").read_text() == "mine"


def test_distinct_error_codes():
    from gecolab import experiment as ex

    codes = [ex.EXIT_OK, ex.EXIT_RUNTIME, ex.EXIT_PARSE, ex.EXIT_INVALID, ex.EXIT_UNKNOWN_KIND, ex.EXIT_UNWRITABLE]
    assert len(set(codes)) == len(codes)


OTHER_KINDS = {
    "lipschitz": """
kind = "lipschitz"
seed = 2
[dataset]
kind = "mixture-of-circles"
n = 40
[grid]
resolution = 6
[iteration]
beta = 0.01
[lipschitz]
mode = "global"
strength = 0.1
""",
    "equipartition": """
kind = "equipartition"
seed = 2
[dataset]
kind = "gaussian-blobs"
n = 30
[grid]
resolution = 6
[iteration]
beta = 0.001
[equipartition]
""",
    "elbo-train": """
kind = "elbo-train"
seed = 2
[dataset]
kind = "gaussian-blobs"
n = 20
[model]
hidden = [8]
[train]
steps = 30
""",
    "diagnostics": """
kind = "diagnostics"
seed = 2
[dataset]
kind = "gaussian-blobs"
n = 20
[model]
hidden = [8]
[train]
steps = 30
[diagnostics]
samples = 500
""",
}

EXPECTED_FILES = {
    "lipschitz": {"lipschitz_trajectory.csv"},
    "equipartition": {"gamma.csv"},
    "elbo-train": {"trace.csv", "model.ckpt"},
    "diagnostics": {"diagnostics.csv", "trace.csv"},
}


@pytest.mark.parametrize("kind", sorted(OTHER_KINDS))
def test_every_kind_runs_deterministically(tmp_path, kind):
    cfg = load_config(_write(tmp_path, OTHER_KINDS[kind]))
    assert validate_config(cfg) == []
    a = run_config(cfg, tmp_path / "a")
    b = run_config(cfg, tmp_path / "b")
    assert {f["name"] for f in a.files} == EXPECTED_FILES[kind]
    assert a.files == b.files


@pytest.mark.parametrize("name", ["phase_sweep.toml", "geco_bars.toml"])
def test_shipped_configs_validate(name):
    from pathlib import Path

    path = Path(__file__).resolve().parent.parent / "configs" / name
    assert validate_config(load_config(path)) == []
