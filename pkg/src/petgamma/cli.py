"""Command line client.

Every subcommand posts to the HTTP service: a running server when
``--server`` is given, otherwise the same application in process.

    petgamma ppp-rate --config cfg.json --out out/ --seeds 0,1,2
    petgamma serve --port 8000
"""
import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import httpx

from .experiments import EXPERIMENTS

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("seeds must be comma-separated integers") from None


def build_parser():
    p = argparse.ArgumentParser(prog="petgamma", description="Dynamic PET convergence experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} harness")
        s.add_argument("--config", type=Path, help="JSON config (defaults apply when omitted)")
        s.add_argument("--out", help="output directory, overrides the config")
        s.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overrides the config")
        s.add_argument("--server", help="service URL; in-process when omitted")
    s = sub.add_parser("selftest", help="fast checks on known cases")
    s.add_argument("--out")
    s.add_argument("--server")
    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def _client(server):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    with warnings.catch_warnings():
        # newer starlette nags about the httpx transport it still uses
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient
    from .service import app
    return TestClient(app)


def _read_config(path):
    if path is None:
        return {}
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SystemExit(_config_failure("config", f"no such file: {path}"))
    except json.JSONDecodeError as e:
        raise SystemExit(_config_failure("config", f"invalid JSON: {e}"))


def _config_failure(path, message):
    print(f"config error: {path}: {message}" if path else f"config error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _report(resp):
    if resp.status_code == 422:
        body = resp.json()
        if "message" in body:
            return _config_failure(body.get("path"), body["message"])
        return _config_failure(None, json.dumps(body.get("detail")))
    resp.raise_for_status()
    body = resp.json()
    for c in body["checks"]:
        print(c["line"])
    for a in body["artifacts"]:
        print(f"wrote {a}")
    return EXIT_OK if body["passed"] else EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        import uvicorn

        from .service import app
        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK
    with _client(args.server) as client:
        if args.command == "selftest":
            return _report(client.post("/selftest", json={"out": args.out}))
        body = {"config": _read_config(args.config), "out": args.out, "seeds": args.seeds}
        return _report(client.post(f"/run/{args.command}", json=body))


if __name__ == "__main__":
    sys.exit(main())
