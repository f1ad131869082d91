import json

import pytest

from petgamma.cli import EXIT_CONFIG, EXIT_OK, build_parser, main


def test_parser_knows_every_harness():
    p = build_parser()
    args = p.parse_args(["gamma-study", "--seeds", "1,2,3", "--out", "x"])
    assert args.seeds == [1, 2, 3]
    with pytest.raises(SystemExit):
        p.parse_args(["ppp-rate", "--seeds", "a,b"])


def test_run_and_exit_status(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seeds": [0, 1]}))
    code = main(["flat-rate", "--config", str(cfg), "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "[PASS] flat-rate slope" in out
    assert (tmp_path / "out" / "flat.csv").exists()


def test_config_error_exit(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seeds": []}))
    assert main(["ppp-rate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error: seeds" in capsys.readouterr().err


def test_missing_and_broken_config(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["ppp-rate", "--config", str(tmp_path / "none.json")])
    assert info.value.code == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(SystemExit) as info:
        main(["ppp-rate", "--config", str(bad)])
    assert info.value.code == EXIT_CONFIG
    assert "invalid JSON" in capsys.readouterr().err


def test_selftest_command(tmp_path, capsys):
    assert main(["selftest", "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.count("[PASS]") >= 20
