import numpy as np
import pytest

from petgamma import report


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1, "c": True}, {"a": np.int64(2), "b": np.float64(1 / 3), "c": False}]
    p = report.write_csv(tmp_path / "t.csv", rows, ("a", "b", "c"))
    back = report.read_csv(p)
    assert back[1] == {"a": "2", "b": repr(1 / 3), "c": "false"}
    assert float(back[1]["b"]) == 1 / 3
    assert b"\r" not in p.read_bytes()


def test_listmode_format(tmp_path):
    ev = np.array([[0.1, 1 / 3, 2.0], [0.9, np.pi, 6.2]])
    p = report.write_listmode(tmp_path / "ev.csv", ev)
    text = p.read_bytes().decode()
    assert text.startswith("t,alpha_a,alpha_b\n")
    assert text.count("\n") == 3 and "\r" not in text
    assert np.array_equal(report.read_listmode(p), ev)
    empty = report.write_listmode(tmp_path / "empty.csv", np.zeros((0, 3)))
    assert report.read_listmode(empty).shape == (0, 3)


def test_density_csv(tmp_path):
    s = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4) / 7
    p = report.write_density(tmp_path / "d.csv", s)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert data.shape == (6, 6)
    assert np.array_equal(data[:, 2:].reshape(2, 3, 4), s)


def test_loglog_slope():
    x = np.array([1.0, 10.0, 100.0])
    assert report.loglog_slope(x, 3 * x ** -0.5) == pytest.approx(-0.5)
    assert np.isnan(report.loglog_slope([1.0], [1.0]))


def test_svg(tmp_path):
    p = report.svg_loglog(tmp_path / "c.svg", {"one": ([1, 10], [1, 0.1]), "flat": ([1, 10], [0, 0])}, "t")
    text = p.read_text()
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert text.count("<polyline") == 2
