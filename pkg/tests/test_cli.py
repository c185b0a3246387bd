import copy
import json
import subprocess
import sys

import pytest

from mfcontrol import __version__
from mfcontrol.cli import list_catalogue, main
from mfcontrol.scenarios import BUILTIN_SCENARIOS


def _write(tmp_path, name, data):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(data, indent=2))
    return path


def _small_shift(**checks):
    data = copy.deepcopy(BUILTIN_SCENARIOS["shift"])
    data["grid"]["substeps"] = 50
    data["checks"] = checks or {"value": {"expected": 1.0, "tol": 1e-6}, "value_monotonicity": {},
                                "dini_sensitivity_check": {"directions": 4}, "feedback_membership": {}}
    return data


def test_catalogue_lists_everything(capsys):
    assert main(["catalogue"]) == 0
    text = capsys.readouterr().out
    for name in ("convolution", "mean_attraction", "w2_squared_to_target", "joint_semiconcavity_defect",
                 "sufficiency_verdict", "shift_suboptimal"):
        assert f"  {name}\n" in text
    assert text == list_catalogue()


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__
    proc = subprocess.run([sys.executable, "-m", "mfcontrol", "version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == __version__


@pytest.fixture(scope="module")
def shift_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("shift")
    data = copy.deepcopy(BUILTIN_SCENARIOS["shift"])
    code = main(["run", str(_write(tmp, "shift", data)), "--out", str(tmp / "out")])
    return code, tmp / "out"


def test_run_shift_passes_every_check(shift_run):
    code, out = shift_run
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["all_passed"] and summary["control"] == "0-0-0-0"
    value = next(r for r in summary["checks"] if r["name"] == "value")
    assert value["metrics"]["value"] == pytest.approx(1.0, abs=1e-6)
    verdict = next(r for r in summary["checks"] if r["name"] == "sufficiency_verdict")
    assert verdict["metrics"]["verdict"] == "OPTIMAL-CONSISTENT"
    for name in ("trajectories.csv", "values.csv", "dini_sensitivity_check.csv", "semigroup.csv"):
        assert (out / name).exists()


def test_run_suboptimal_is_inconclusive(tmp_path, capsys):
    data = copy.deepcopy(BUILTIN_SCENARIOS["shift_suboptimal"])
    data["grid"]["substeps"] = 50
    code = main(["run", str(_write(tmp_path, "sub", data)), "--out", str(tmp_path / "out")])
    assert code == 1
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    verdict = next(r for r in summary["checks"] if r["name"] == "sufficiency_verdict")
    assert verdict["metrics"]["verdict"] == "INCONCLUSIVE"
    assert "FAIL  value_monotonicity" in capsys.readouterr().out


def test_reruns_and_thread_counts_are_bit_identical(tmp_path):
    path = _write(tmp_path, "s", _small_shift())
    outs = []
    for k, extra in enumerate(([], [], ["--threads", "3"])):
        out = tmp_path / f"o{k}"
        assert main(["run", str(path), "--out", str(out), "--seed", "7", *extra]) == 0
        outs.append(out)
    for name in ("summary.json", "values.csv", "dini_sensitivity_check.csv", "trajectories.csv"):
        first = (outs[0] / name).read_bytes()
        assert all((o / name).read_bytes() == first for o in outs[1:]), name
    assert main(["run", str(path), "--out", str(tmp_path / "o9"), "--seed", "8"]) == 0
    assert (tmp_path / "o9" / "dini_sensitivity_check.csv").read_bytes() != \
        (outs[0] / "dini_sensitivity_check.csv").read_bytes()


def test_bad_json_reports_line_and_column(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "schema_version": 1,\n  "name": "x"\n  "seed": 0\n}\n')
    assert main(["run", str(path)]) == 2
    assert f"{path}:4:3" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["field"].update(name="nope"), "unknown name"),
    (lambda d: d.update(schema_version=2), "schema_version"),
    (lambda d: d.update(control=[[0.0]]), "need 4 values"),
    (lambda d: d.update(control=[[5.0]] * 4), "outside the control set"),
    (lambda d: d.update(dim=3), "dim=3"),
    (lambda d: d["checks"].update(bogus={}), "unknown checks"),
])
def test_invalid_scenarios_exit_two(tmp_path, capsys, mutate, message):
    data = _small_shift()
    mutate(data)
    assert main(["run", str(_write(tmp_path, "x", data)), "--out", str(tmp_path / "o")]) == 2
    assert message in capsys.readouterr().err


def test_invalid_flags_exit_two(tmp_path):
    path = _write(tmp_path, "s", _small_shift())
    assert main(["run", str(path), "--threads", "0"]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_strict_turns_warnings_into_failures(tmp_path):
    data = _small_shift(dini_sensitivity_check={"directions": 3})
    data["grid"]["t1"] = 0.2
    path = _write(tmp_path, "w", data)
    assert main(["run", str(path), "--out", str(tmp_path / "lax")]) == 0
    lax = json.loads((tmp_path / "lax" / "summary.json").read_text())
    assert any("clamped" in w for w in lax["checks"][0]["warnings"])
    assert main(["run", str(path), "--out", str(tmp_path / "strict"), "--strict"]) == 1


def test_shipped_scenario_files_match_builtins():
    import pathlib

    from mfcontrol.scenarios import load_scenario

    root = pathlib.Path(__file__).parent.parent / "scenarios"
    for name, data in BUILTIN_SCENARIOS.items():
        sc = load_scenario(root / f"{name}.json")
        raw = dict(sc.raw)
        raw.pop("output_dir")
        assert raw == data


def test_initial_measure_from_text_file(tmp_path):
    from mfcontrol.measures import EmpiricalMeasure
    from mfcontrol.scenarios import load_scenario

    m = EmpiricalMeasure([[2.0], [1.0]], [0.25, 0.75])
    m.save(tmp_path / "m0.txt")
    data = _small_shift()
    data["initial_measure"] = {"file": "m0.txt"}
    sc = load_scenario(_write(tmp_path, "f", data))
    assert sc.initial.same_as(m)
