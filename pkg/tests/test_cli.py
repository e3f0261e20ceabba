import json
import math

import numpy as np
import pytest

from spcrit import acceptance
from spcrit.cli import main
from spcrit.model import dump_model


@pytest.fixture
def m1_path(tmp_path):
    path = tmp_path / "m1.json"
    path.write_text(dump_model(acceptance.model_m1()))
    return str(path)


@pytest.fixture
def m2_path(tmp_path):
    path = tmp_path / "m2.json"
    path.write_text(dump_model(acceptance.model_m2()))
    return str(path)


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def test_validate_ok(m1_path, capsys):
    assert main(["validate", m1_path]) == 0
    out = capsys.readouterr().out
    assert out.startswith("quantity,value")
    assert "grey_satisfied,1" in out


def test_validate_bad_model_exits_2(tmp_path):
    doc = json.loads(dump_model(acceptance.model_m2()))
    doc["m"] = [0, 1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == 2


def test_spectral_critical(m2_path, tmp_path):
    out = tmp_path / "spec.csv"
    assert main(["spectral", m2_path, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "quantity,value"
    table = dict(line.split(",", 1) for line in lines[1:4] + lines[4:5])
    assert abs(float(table["lambda0"])) <= 1e-12
    assert float(table["gamma"]) == pytest.approx(2.0, rel=1e-12)
    assert "state,phi0,psi0" in lines
    nu_line = next(line for line in lines if line.startswith("nu,"))
    assert float(nu_line.split(",")[1]) == pytest.approx(2 ** -0.5, abs=1e-12)
    a_row = lines[lines.index("state,phi0,psi0") + 1].split(",")
    assert a_row[0] == "A"
    assert float(a_row[1]) == pytest.approx(2 ** -0.5, abs=1e-12)


def test_spectral_noncritical_exits_2(tmp_path):
    model = acceptance.model_m2()
    doc = json.loads(dump_model(model))
    doc["a"] = [0.3, 0.3]
    path = tmp_path / "super.json"
    path.write_text(json.dumps(doc))
    assert main(["spectral", str(path)]) == 2


def test_kolmogorov_table(m1_path, tmp_path):
    out = tmp_path / "kol.csv"
    code = main(
        ["kolmogorov", m1_path, "--mu", "1", "--t-grid", "100:1000:3",
         "--out", str(out)]
    )
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["t", "p_survival", "t_times_p", "limit"]
    assert len(rows) == 3
    ts = [float(r[0]) for r in rows]
    np.testing.assert_allclose(ts, np.geomspace(100, 1000, 3))
    assert float(rows[0][3]) == pytest.approx(2.0)
    assert float(rows[-1][2]) == pytest.approx(1000 * -math.expm1(-0.002),
                                               abs=1e-5)


def test_yaglom_row(m1_path, tmp_path):
    out = tmp_path / "yag.csv"
    code = main(
        ["yaglom", m1_path, "--f", "1", "--lambda", "1", "--t", "100",
         "--out", str(out)]
    )
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["lambda", "t", "value", "target", "p_survival"]
    assert float(rows[0][2]) == pytest.approx(0.66444, abs=1e-4)
    assert float(rows[0][3]) == pytest.approx(2 / 3, rel=1e-12)


def test_moments_row(m2_path, tmp_path):
    out = tmp_path / "mom.csv"
    code = main(
        ["moments", m2_path, "--f", "1,-1", "--t", "1", "--mu", "1,0",
         "--out", str(out)]
    )
    assert code == 0
    header, rows = read_csv(out)
    assert header == ["mean", "variance", "second_moment"]
    mean, var, second = map(float, rows[0])
    assert mean == pytest.approx(math.exp(-2.0), rel=1e-10)
    assert var == pytest.approx((1 - math.exp(-4.0)) / 2, rel=1e-8)
    assert second == pytest.approx(var + mean * mean, rel=1e-12)


def test_simulate_output_shape_and_determinism(m2_path, tmp_path):
    args = [
        "simulate", m2_path, "--mu", "1,0", "--t", "2", "--dt", "0.01",
        "--paths", "500", "--seed", "9", "--f", "1,-1",
    ]
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2), "--threads", "3"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    header, rows = read_csv(out1)
    assert header == ["path_id", "survived", "mass_A", "mass_B", "V", "Z"]
    assert len(rows) == 500
    assert {r[1] for r in rows} <= {"0", "1"}


def test_vector_from_file(m2_path, tmp_path):
    fvec = tmp_path / "f.csv"
    fvec.write_text("value\n1\n-1\n")
    out = tmp_path / "mom.csv"
    code = main(
        ["moments", m2_path, "--f", str(fvec), "--t", "1", "--mu", "1,0",
         "--out", str(out)]
    )
    assert code == 0
    _, rows = read_csv(out)
    assert float(rows[0][1]) == pytest.approx((1 - math.exp(-4.0)) / 2,
                                              rel=1e-8)


def test_bad_t_grid_is_a_runtime_error(m1_path):
    assert main(["kolmogorov", m1_path, "--mu", "1", "--t-grid", "5"]) == 1


def test_missing_file_is_a_runtime_error(tmp_path):
    assert main(["spectral", str(tmp_path / "absent.json")]) == 1


def test_verify_bad_model_exits_2(tmp_path):
    doc = json.loads(dump_model(acceptance.model_m1()))
    doc["m"] = [-1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["verify", str(bad)]) == 2
