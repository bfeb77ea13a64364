import csv
import json

import pytest

from nlsmsol import cli

SMALL = {
    "version": 1, "p": 7,
    "solitons": [{"c": 1.0, "v": 0.5, "x0": 0.0}],
    "amplitudes": [0.0],
    "grid": {"L": 100, "M": 2048},
    "times": {"t0": 3.0, "Sn": 3.5},
    "integrator": {"dt": 1e-3, "scheme": "fourth-order", "stride": 50},
}


def _cfg(tmp_path, body, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return str(path)


def _run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr()


@pytest.mark.parametrize("body, needle", [
    ({"version": 1, "bogus": 1}, "bogus"),
    ({"version": 2}, "version"),
    ({"version": 1, "p": 7, "solitons": [{"c": -1.0}]}, "solitons"),
    ({**SMALL, "amplitudes": [1.0, 2.0]}, "amplitudes"),
    ({**SMALL, "times": {"t0": 3.0, "Sn": 2.0}}, "Sn"),
])
def test_invalid_configs_exit_2(tmp_path, capsys, body, needle):
    code, out = _run(capsys, "ground-state", "--config", _cfg(tmp_path, body),
                     "--output", str(tmp_path / "o"))
    assert code == 2
    err = json.loads(out.err)
    assert err["exit_code"] == 2 and needle in err["message"]


def test_subcritical_exponent_exit_2(tmp_path, capsys):
    code, _ = _run(capsys, "ground-state", "--config", _cfg(tmp_path, {"version": 1, "p": 3}),
                   "--output", str(tmp_path / "o"))
    assert code == 2


def test_spectrum_requires_grid(tmp_path, capsys):
    code, out = _run(capsys, "spectrum", "--config", _cfg(tmp_path, {"version": 1}),
                     "--output", str(tmp_path / "o"))
    assert code == 2 and "grid" in json.loads(out.err)["message"]


def test_bad_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("NLS_MSOL_THREADS", "many")
    code, _ = _run(capsys, "ground-state", "--output", str(tmp_path / "o"))
    assert code == 2


def test_ground_state_defaults(tmp_path, capsys):
    code, _ = _run(capsys, "ground-state", "--output", str(tmp_path / "o"))
    assert code == 0
    rep = json.loads((tmp_path / "o" / "ground_state.json").read_text())
    assert rep["profiles"]["1"]["ode_residual"] < 1e-10
    assert len(rep["config_hash"]) == 64


def test_spectrum_scaling_row(tmp_path, capsys):
    body = {"version": 1, "p": 7, "solitons": [{"c": 1.0}], "grid": {"L": 100, "M": 2048}}
    code, _ = _run(capsys, "spectrum", "--config", _cfg(tmp_path, body),
                   "--output", str(tmp_path / "o"))
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "o" / "scaling.csv").open()))
    assert float(rows[0]["c"]) == 1.0 and float(rows[0]["ratio_linear"]) == pytest.approx(1, abs=1e-12)


def test_evolve_writes_conserved(tmp_path, capsys):
    body = {**SMALL, "times": {"t0": 3.0, "Sn": 3.2}}
    code, _ = _run(capsys, "evolve", "--config", _cfg(tmp_path, body), "--output", str(tmp_path / "o"))
    assert code == 0
    rep = json.loads((tmp_path / "o" / "evolve.json").read_text())
    assert rep["drift"]["mass_rel"] < 1e-11
    assert (tmp_path / "o" / "trajectory" / "trajectory.json").exists()


def test_construct_guard_exit_2(tmp_path, capsys):
    body = {**SMALL, "times": {"t0": 3.0, "Sn": 10.0}}
    code, out = _run(capsys, "construct", "--config", _cfg(tmp_path, body),
                     "--output", str(tmp_path / "o"))
    assert code == 2 and "schedule" in json.loads(out.err)["message"]


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_construct_is_bitwise_deterministic(tmp_path, capsys):
    cfg = _cfg(tmp_path, SMALL)
    for name, threads in (("a", "1"), ("b", "3")):
        code, _ = _run(capsys, "construct", "--config", cfg, "--output", str(tmp_path / name),
                       "--threads", threads)
        assert code == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    rep = json.loads(a["construct.json"])
    assert rep["base"]["certified"] and rep["stages"][0]["A"] == 0.0
    # z == 0 on u = phi: every rate entry is reported as absent
    code, _ = _run(capsys, "diagnose", "--config", cfg, "--output", str(tmp_path / "d"),
                   str(tmp_path / "a" / "base"), str(tmp_path / "a" / "base"))
    assert code == 0
    diag = json.loads((tmp_path / "d" / "diagnostics.json").read_text())
    assert diag["rates"]["z_h1"]["rate"] is None
