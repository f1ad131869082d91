"""FastAPI application: one endpoint per harness plus the self-test."""
import math

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import parse_config
from ..errors import ConfigError
from ..experiments import EXPERIMENTS, run_experiment
from ..selftest import selftest
from .schemas import CheckOut, ErrorOut, Health, RunRequest, RunResponse, SelftestRequest


def _finite(v):
    # JSON has no NaN or infinity
    return float(v) if math.isfinite(v) else None


def _response(summary):
    checks = [CheckOut(name=c.name, passed=c.passed,
                       value=_finite(c.value), threshold=_finite(c.threshold), detail=c.detail, line=c.line())
              for c in summary.checks]
    return RunResponse(which=summary.which, passed=summary.passed, checks=checks,
                       artifacts=summary.artifacts)


def create_app():
    app = FastAPI(title="petgamma", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError):
        body = ErrorOut(path=exc.path, message=exc.message)
        return JSONResponse(status_code=422, content=body.model_dump())

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.get("/experiments")
    def experiments():
        return list(EXPERIMENTS)

    @app.post("/run/{which}", response_model=RunResponse)
    def run(which: str, req: RunRequest):
        cfg = parse_config(req.config)
        return _response(run_experiment(cfg, which, out=req.out, seeds=req.seeds))

    @app.post("/selftest", response_model=RunResponse)
    def run_selftest(req: SelftestRequest):
        return _response(selftest(req.out))

    return app


app = create_app()
