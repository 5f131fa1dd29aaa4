import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from diracsc.cli import ConfigError, execute, main, parse_config

BASE = """
particle: {m: 1, e: 1, c: 1, hbar: 0.05}
field: {kind: zero}
"""

PROPAGATE = BASE + """
propagate: {x0: [0, 0, 0], p0: [1, 0, 0], t_final: 2.0}
"""


def _write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_defaults():
    cfg = parse_config(PROPAGATE)
    assert cfg.blocks["propagate"]["tol"] == 1e-10
    assert cfg.params.hbar == 0.05
    assert cfg.mode == "spatial" and cfg.seed == 0


def test_negative_hbar_names_key():
    with pytest.raises(ConfigError, match="hbar") as exc:
        parse_config(PROPAGATE.replace("hbar: 0.05", "hbar: -1"))
    assert exc.value.path == "particle.hbar"


def test_planar_mode_rejects_inplane_b():
    text = """
particle: {hbar: 0.05}
field: {kind: uniform_magnetic, vector: [1, 0, 0]}
mode: planar
"""
    with pytest.raises(ConfigError, match="planar"):
        parse_config(text)
    parse_config(text.replace("[1, 0, 0]", "[0, 0, 1]"))


@pytest.mark.parametrize("bad, path", [
    ("particle: {m: 1, e: 1, c: 1, hbar: 0.05, tpyo: 3}", "particle.tpyo"),
    ("extra: 1", "extra"),
])
def test_unknown_keys_rejected(bad, path):
    text = PROPAGATE.replace("particle: {m: 1, e: 1, c: 1, hbar: 0.05}", bad) if "particle" in bad else PROPAGATE + bad
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.path == path


def test_type_mismatch_and_missing():
    with pytest.raises(ConfigError, match="propagate.t_final"):
        parse_config(PROPAGATE.replace("t_final: 2.0", "t_final: soon"))
    with pytest.raises(ConfigError, match="propagate.p0"):
        parse_config(BASE + "propagate: {x0: [0, 0, 0], t_final: 1}")
    with pytest.raises(ConfigError, match="particle"):
        parse_config("field: {kind: zero}")


def test_fields_check_uniform_b(tmp_path):
    cfg = parse_config("particle: {hbar: 0.05}\nfield: {kind: uniform_magnetic, vector: [0, 0, 1.5]}\n"
                       "fields_check: {}\n")
    assert execute(cfg, "fields-check", tmp_path) == 0
    rep = json.loads((tmp_path / "fields_check.json").read_text())
    assert rep


def test_propagate_final_row(tmp_path):
    assert execute(parse_config(PROPAGATE), "propagate", tmp_path) == 0
    rows = list(csv.DictReader((tmp_path / "trajectory.csv").open()))
    last = rows[-1]
    assert float(last["t"]) == 2.0
    assert float(last["x"]) == pytest.approx(2 / np.sqrt(2), abs=1e-10)
    assert float(last["y"]) == 0.0 and float(last["z"]) == 0.0


def test_trace_below_shortest_period(tmp_path):
    text = """
particle: {hbar: 0.016}
field: {kind: quartic_coupled, g: 1.0, confinement: 0.05}
mode: planar
trace:
  energies: [1.15]
  window: {Ea: 0.9, Eb: 1.45, w: 0.12, kind: smooth}
  test_function: {T_max: 3.0}
  weyl_samples: 2000
  weyl_box: 2.0
  n_random: 0
  n_line: 2
  n_dir: 4
  box: 1.4
"""
    assert execute(parse_config(text), "trace", tmp_path) == 0
    rep = json.loads((tmp_path / "trace.json").read_text())
    assert "no orbits in support" in (tmp_path / "notices.txt").read_text()
    row = rep["results"][0]
    assert row["orbits"] == []
    assert row["total"] == row["weyl"] > 0


def test_determinism_byte_identical(tmp_path):
    text = """
particle: {hbar: 0.05}
field: {kind: uniform_magnetic, vector: [0, 0, 1.0]}
seed: 11
spin: {x0: [0, 0, 0], p0: [0.6, 0, 0.1], t_final: 3.0, s0: [0.3, 0.4, 0.8660254037844386]}
fields_check: {n_random: 5}
"""
    a, b = tmp_path / "a", tmp_path / "b"
    for sub in ("spin", "fields-check"):
        assert execute(parse_config(text), sub, a) == 0
        assert execute(parse_config(text), sub, b) == 0
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_float_format_round_trips(tmp_path):
    assert execute(parse_config(PROPAGATE), "propagate", tmp_path) == 0
    rows = list(csv.reader((tmp_path / "trajectory.csv").open()))[1:]
    for tok in rows[-1]:
        assert repr(float(tok)) == repr(float(repr(float(tok))))
        assert len(tok.replace("-", "").replace(".", "").split("e")[0].lstrip("0")) <= 17


def test_main_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, PROPAGATE)
    assert main(["propagate", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    bad = _write(tmp_path, PROPAGATE.replace("0.05", "-1"), "bad.yaml")
    assert main(["propagate", "--config", str(bad)]) == 2
    assert main(["propagate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["propagate", "--config", str(good), "--seed", "-3"]) == 2
    assert "hbar" in capsys.readouterr().err


def test_kernel_outside_light_cone(tmp_path):
    text = BASE + "kernel: {x: [0, 0, 0], y: [5, 0, 0], t: 1.0, n: 3}\n"
    assert execute(parse_config(text), "kernel", tmp_path) == 0
    rep = json.loads((tmp_path / "kernel.json").read_text())
    assert rep["n_orbits"] == 0
    assert np.all(np.array(rep["re"]) == 0) and np.all(np.array(rep["im"]) == 0)


def test_console_entry_point(tmp_path):
    cfg = _write(tmp_path, PROPAGATE)
    r = subprocess.run([sys.executable, "-m", "diracsc", "propagate", "--config", str(cfg), "--out",
                        str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "o" / "trajectory.csv").exists()


def test_caustic_exit_code(tmp_path):
    # isotropic oscillator: the rest orbit at the centre refocuses at t = pi
    text = ("particle: {hbar: 0.05}\nfield: {kind: harmonic_scalar, vector: [1, 1, 1]}\n"
            "kernel: {x: [0, 0, 0], y: [0, 0, 0], t: 3.141592653589793, n: 3, extent: 1.0, branches: ['+']}\n")
    assert execute(parse_config(text), "kernel", tmp_path) == 4
