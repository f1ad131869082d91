import time

from petgamma.selftest import CHECKS, selftest


def test_passes_quickly(tmp_path):
    t = time.perf_counter()
    s = selftest(tmp_path)
    assert time.perf_counter() - t < 60
    assert s.passed, [c.line() for c in s.checks if not c.passed]
    assert len(s.checks) == len(CHECKS)


def test_byte_identical_reports(tmp_path):
    selftest(tmp_path / "a")
    selftest(tmp_path / "b")
    a = (tmp_path / "a" / "summary_selftest.csv").read_bytes()
    assert a == (tmp_path / "b" / "summary_selftest.csv").read_bytes()


def test_corrupted_cache_is_rebuilt(tmp_path, monkeypatch):
    monkeypatch.setenv("PETGAMMA_CACHE", str(tmp_path / "cache"))
    assert selftest().passed
    files = list((tmp_path / "cache").iterdir())
    assert files
    for f in files:
        f.write_bytes(b"garbage")
    assert selftest().passed
    assert all(f.read_bytes() != b"garbage" for f in files)
