import numpy as np
import pytest

from petgamma import report
from petgamma.config import parse_config
from petgamma.errors import ConfigError
from petgamma.experiments import EXPERIMENTS, run_experiment

SMALL = {"geometry": {"grid_n": 16, "nt": 2}, "solver": {"max_iter": 200}}


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_ppp_rate_table(tmp_path):
    s = run_experiment(parse_config({"seeds": [0, 1, 2]}), "ppp-rate", out=tmp_path)
    rows = report.read_csv(tmp_path / "rate.csv")
    assert len(rows) == 10 * 3
    assert any("slope" in c.name for c in s.checks)
    assert (tmp_path / "summary_ppp-rate.csv").exists()


def test_simulate_event_counts(tmp_path):
    cfg = parse_config({**SMALL, "seeds": list(range(30)), "sequences": {"q": [1e3]}})
    s = run_experiment(cfg, "simulate", out=tmp_path)
    rows = report.read_csv(tmp_path / "simulate.csv")
    counts = np.array([int(r["events"]) for r in rows])
    expected = float(rows[0]["expected"])
    assert expected == pytest.approx(1e3 * 0.8)
    assert abs(counts.mean() - expected) <= 3 * np.sqrt(expected / len(counts))
    lm = report.read_listmode(tmp_path / "listmode_seed0.csv")
    assert len(lm) == counts[0]
    assert np.all((lm[:, 0] >= 0) & (lm[:, 0] < 1))
    assert np.all((lm[:, 1:] >= 0) & (lm[:, 1:] < 2 * np.pi))
    assert s.passed


@pytest.mark.parametrize("which", ["ppp-rate", "flat-rate", "simulate", "reconstruct"])
def test_reproducible(tmp_path, which):
    cfg = parse_config({**SMALL, "seeds": [0, 1], "partitions": {"levels": 1}, "sequences": {"q": [300.0]}}
                       if which in ("simulate", "reconstruct") else {"seeds": [0, 1]})
    a = run_experiment(cfg, which, out=tmp_path / "a")
    b = run_experiment(cfg, which, out=tmp_path / "b")
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert [c.value for c in a.checks] == [c.value for c in b.checks]


def test_summary_values_come_from_csv(tmp_path):
    s = run_experiment(parse_config({"seeds": [0, 1]}), "flat-rate", out=tmp_path)
    rows = report.read_csv(tmp_path / "summary_flat-rate.csv")
    assert [float(r["value"]) for r in rows] == [c.value for c in s.checks]


def test_recovery_small(tmp_path):
    cfg = parse_config({"geometry": {"grid_n": 16, "nt": 8}, "ground_truth": {"kind": "jump"},
                        "sequences": {"delta": [0.1, 0.01]}})
    s = run_experiment(cfg, "recovery", out=tmp_path)
    rows = report.read_csv(tmp_path / "recovery.csv")
    assert len(rows) == 2
    assert all(float(r["S_times_delta"]) <= 1.05 for r in rows)
    assert len(s.checks) == 2


def test_gamma_study_shape(tmp_path):
    cfg = parse_config({**SMALL, "seeds": [0], "sequences": {"q": [100.0, 300.0, 1000.0]}})
    run_experiment(cfg, "gamma-study", out=tmp_path)
    rows = report.read_csv(tmp_path / "gamma.csv")
    assert [int(r["n"]) for r in rows] == [1, 2, 3]
    assert [int(r["M"]) for r in rows] == [16, 32, 64]
    assert len({r["limit_energy"] for r in rows}) == 1
    assert (tmp_path / "gamma.svg").exists()


def test_bad_requests(tmp_path):
    cfg = parse_config({})
    with pytest.raises(ConfigError):
        run_experiment(cfg, "everything", out=tmp_path)
    with pytest.raises(ConfigError) as info:
        run_experiment(cfg, "ppp-rate", out=tmp_path, seeds=[])
    assert info.value.path == "seeds"
    with pytest.raises(ConfigError):
        run_experiment(parse_config({"sequences": {"q": [1.0, 2.0], "r": [1.0]}}), "ppp-rate", out=tmp_path)
    assert len(EXPERIMENTS) == 6
