"""HTTP service exposing the experiment harnesses."""
from .app import app, create_app

__all__ = ["app", "create_app"]
