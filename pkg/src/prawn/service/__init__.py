"""HTTP service exposing the experiment runner."""

from .app import create_app  # noqa: F401
