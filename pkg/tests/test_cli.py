import json
import math

import pytest

from abstain_metrology.cli import CURVE_COLUMNS, PROFILE_COLUMNS, RunRecord, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def record(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return RunRecord.from_json(out)


def csv_record(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return RunRecord.from_csv(out)


def test_fidelity_phase_no_abstention(capsys):
    rec = record(capsys, "fidelity", "--state", "phase", "--n", "10", "--q", "0")
    assert rec.command == "fidelity"
    assert rec.parameters["n"] == 10 and rec.parameters["method"] == "exact"
    assert rec.outputs[0]["F"] == pytest.approx(21 / 22, abs=1e-14)


def test_fidelity_both_methods(capsys):
    row = record(capsys, "fidelity", "--state", "phase", "--n", "200", "--q", "0.25", "--method", "both").outputs[0]
    assert abs(row["deficit_ratio"] - 1) <= 0.05
    assert row["residual"] == pytest.approx(abs(row["F"] - row["F_asymptotic"]), abs=1e-16)


def test_fidelity_copies_single_qubit(capsys):
    row = record(capsys, "fidelity", "--state", "copies", "--n", "1", "--q", "0.5").outputs[0]
    assert row["F"] == pytest.approx(0.75, abs=1e-15)


def test_fidelity_asymptotic_copies(capsys):
    row = record(capsys, "fidelity", "--state", "copies", "--n", "100", "--q", "0", "--method", "asymptotic").outputs[0]
    assert row["F"] == pytest.approx(1 - 1 / 400, abs=1e-15)


def test_fidelity_from_file(capsys, tmp_path):
    path = tmp_path / "probe.json"
    path.write_text(json.dumps({"n": 2, "coeffs": [3 ** -0.5] * 3}))
    row = record(capsys, "fidelity", "--state", f"file:{path}", "--q", "0.25").outputs[0]
    assert row["delta"] == pytest.approx(2 * math.sqrt(10) / 9, abs=1e-12)
    code, _, err = run(capsys, "fidelity", "--state", f"file:{path}", "--q", "0.25", "--method", "asymptotic")
    assert code == 2 and "error" in err


def test_usage_errors(capsys, tmp_path):
    code, _, _ = run(capsys, "fidelity", "--state", "bogus", "--n", "3")
    assert code == 2
    code, _, _ = run(capsys, "fidelity", "--state", f"file:{tmp_path / 'missing.json'}")
    assert code == 2
    for argv in (["simulate", "--n", "4", "--shots", "0"], ["fidelity", "--n", "4", "--q", "1.0"],
                 ["fidelity", "--n", "0"], ["frobnicate"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2
    capsys.readouterr()


def test_numerical_failure_exit_code(capsys):
    code, out, err = run(capsys, "fidelity", "--state", "phase", "--n", "200", "--q", "0.1", "--max-iter", "1")
    assert code == 3 and out == "" and "numerical failure" in err


def test_empty_grid_writes_nothing(capsys, tmp_path):
    target = tmp_path / "curve.csv"
    code, _, _ = run(capsys, "curve", "--state", "copies", "--n", "10", "--q-min", "0.5", "--q-max", "0.4",
                     "-o", str(target))
    assert code == 2 and not target.exists()
    code, _, _ = run(capsys, "curve", "--n", "10", "--q-values", "0.2,1.5")
    assert code == 2


def test_curve_copies(capsys):
    rec, cols = csv_record(capsys, "curve", "--state", "copies", "--n", "100")
    assert cols == CURVE_COLUMNS
    qs = [r["q"] for r in rec.outputs]
    assert qs[0] == 0.05 and qs[-1] == 0.95 and len(qs) == 19
    assert rec.parameters["q_grid"] == qs
    assert max(r["abs_deviation"] for r in rec.outputs) <= 0.02
    for r in rec.outputs:
        assert r["NS_exact"] == pytest.approx(2 * 100 * (1 - r["F_exact"]), rel=1e-12)


def test_curve_phase_shape(capsys):
    rec, _ = csv_record(capsys, "curve", "--state", "phase", "--n", "200", "--q-values", "0.1,0.2,0.3,0.4,0.5,0.6,0.8")
    ns = [r["NS_exact"] for r in rec.outputs]
    assert all(b < a for a, b in zip(ns[:5], ns[1:5]))
    assert ns[4] == pytest.approx(ns[5], abs=1e-12) and ns[5] == pytest.approx(ns[6], abs=1e-12)
    assert all(r["NS_parametric"] is None for r in rec.outputs)


def test_curve_threads_match_serial(capsys, monkeypatch):
    argv = ("curve", "--state", "copies", "--n", "40", "--q-values", "0.1,0.5,0.9")
    serial, _ = csv_record(capsys, *argv)
    monkeypatch.setenv("ABSTAIN_METROLOGY_THREADS", "3")
    threaded, _ = csv_record(capsys, *argv)
    assert serial.outputs == threaded.outputs


def test_profile(capsys):
    rec80, cols = csv_record(capsys, "profile", "--state", "copies", "--n", "80", "--lambda", "1.5")
    assert cols == PROFILE_COLUMNS
    assert len(rec80.outputs) == 81
    dev80 = max(abs(r["sqrtN_xi"] - r["phi_analytic"]) for r in rec80.outputs)
    assert dev80 <= 0.15
    assert all(r["sqrtN_xi"] <= r["lambda_psi"] * (1 + 1e-9) for r in rec80.outputs)
    rec20, _ = csv_record(capsys, "profile", "--state", "copies", "--n", "20")
    dev20 = max(abs(r["sqrtN_xi"] - r["phi_analytic"]) for r in rec20.outputs)
    assert dev20 > dev80
    assert rec20.parameters["lambda"] == 1.5


def test_profile_file_output_round_trip(capsys, tmp_path):
    target = tmp_path / "profile.csv"
    assert main(["profile", "--state", "phase", "--n", "30", "--lambda", "1.2", "-o", str(target)]) == 0
    assert capsys.readouterr().out == ""
    raw = target.read_bytes()
    assert b"\r\n" in raw
    assert raw.startswith(b"# {") and raw.count(b"\n") == raw.count(b"\r\n")
    rec, cols = RunRecord.from_csv(raw.decode())
    lines = raw.decode().split("\r\n")
    assert lines[1].split(",") == cols
    line = lines[4].split(",")
    assert float(line[2]) == rec.outputs[2]["sqrtN_xi"]
    assert rec.parameters["q"] == pytest.approx(1 - 1 / 1.44, abs=1e-15)


def test_simulate_deterministic(capsys):
    argv = ("simulate", "--state", "phase", "--n", "20", "--q", "0.3", "--shots", "4000", "--seed", "42")
    a = json.loads(run(capsys, *argv)[1])
    b = json.loads(run(capsys, *argv)[1])
    a.pop("timestamp"), b.pop("timestamp")
    assert a == b
    row = a["outputs"][0]
    assert abs(row["empirical_q"] - 0.3) <= 4 * math.sqrt(0.21 / 4000)
    assert abs(row["empirical_fidelity"] - row["exact_fidelity"]) <= 4 * row["fidelity_stderr"]
    assert a["parameters"]["seed"] == 42


def test_critical(capsys):
    row = record(capsys, "critical", "--state", "phase", "--n", "2").outputs[0]
    assert row["q_star"] == pytest.approx(1 / 3, abs=1e-12)
    assert row["argmin"] == 1 and row["attainable"] is True
    assert record(capsys, "critical", "--n", "2000").outputs[0]["q_star"] == pytest.approx(0.5, abs=1e-3)
    row = record(capsys, "critical", "--state", "copies", "--n", "20").outputs[0]
    factor = row["q_bar_star"] * 2 ** 20
    assert factor == pytest.approx(1 / ((2 / 22) * math.sin(math.pi / 22) ** 2), rel=1e-10)
    assert factor > 1


def test_json_round_trip_and_nan():
    rec = RunRecord("x", {"a": 1}, [{"v": 0.1 + 0.2, "w": float("nan")}])
    back = RunRecord.from_json(rec.to_json())
    assert back.outputs[0]["v"] == 0.1 + 0.2
    assert back.outputs[0]["w"] is None
    assert back.timestamp == rec.timestamp
