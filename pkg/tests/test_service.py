import warnings

import pytest

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from petgamma import __version__
from petgamma.service import create_app


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "version": __version__}


def test_experiment_list(client):
    assert client.get("/experiments").json()[0] == "ppp-rate"


def test_run(client, tmp_path):
    r = client.post("/run/flat-rate", json={"config": {"seeds": [0, 1]}, "out": str(tmp_path)})
    assert r.status_code == 200
    body = r.json()
    assert body["which"] == "flat-rate"
    assert body["passed"] == all(c["passed"] for c in body["checks"])
    assert body["checks"][0]["line"].startswith("[PASS]") or body["checks"][0]["line"].startswith("[FAIL]")
    assert str(tmp_path / "flat.csv") in body["artifacts"]


def test_seed_override(client, tmp_path):
    r = client.post("/run/ppp-rate", json={"config": {"seeds": [0]}, "seeds": [4, 5], "out": str(tmp_path)})
    assert r.status_code == 200
    assert (tmp_path / "rate.csv").read_text().count("\n") == 1 + 2 * 10


@pytest.mark.parametrize("body, path", [({"config": {"seeds": []}}, "seeds"),
                                        ({"config": {"probabilities": {"p_a": 0.9}}}, "probabilities"),
                                        ({"config": {}, "seeds": []}, "seeds")])
def test_config_errors(client, tmp_path, body, path):
    r = client.post("/run/ppp-rate", json={**body, "out": str(tmp_path)})
    assert r.status_code == 422
    assert r.json()["path"] == path


def test_unknown_experiment(client, tmp_path):
    r = client.post("/run/nothing", json={"out": str(tmp_path)})
    assert r.status_code == 422
    assert r.json()["path"] == "which"


def test_malformed_body(client):
    r = client.post("/run/ppp-rate", json={"seeds": "all"})
    assert r.status_code == 422
    assert "detail" in r.json()


def test_selftest_endpoint(client, tmp_path):
    r = client.post("/selftest", json={"out": str(tmp_path)})
    assert r.status_code == 200
    assert r.json()["passed"]
    assert (tmp_path / "summary_selftest.csv").exists()
