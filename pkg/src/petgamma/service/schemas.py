"""Request and response bodies of the HTTP service."""
from typing import Any, Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    out: Optional[str] = None
    seeds: Optional[list[int]] = None


class SelftestRequest(BaseModel):
    out: Optional[str] = None


class CheckOut(BaseModel):
    name: str
    passed: bool
    value: Optional[float]
    threshold: Optional[float]
    detail: str
    line: str


class RunResponse(BaseModel):
    which: str
    passed: bool
    checks: list[CheckOut]
    artifacts: list[str]


class ErrorOut(BaseModel):
    path: Optional[str]
    message: str


class Health(BaseModel):
    status: str = "ok"
    version: str
