"""Command-line client of the experiment service.

Every command reads a JSON job file (``--config``), forwards it to the
service, and prints the JSON response.  Without ``--server`` the service
runs in process, so no daemon is needed; with it the same requests go over
HTTP.  Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

_PATHS = {
    "train": "/train",
    "eval": "/eval",
    "adapt": "/adapt",
    "weights": "/weights",
    "analyze-pca": "/analyze/pca",
    "analyze-neurons": "/analyze/neurons",
    "synth-gen": "/synth-gen",
}

CONFIG_EXIT = 1
RUNTIME_EXIT = 2


def _load_job(config_path: str) -> dict:
    try:
        payload = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"config error: {config_path}: {exc}", err=True)
        sys.exit(CONFIG_EXIT)
    if not isinstance(payload, dict):
        click.echo(f"config error: {config_path}: top level must be a JSON object", err=True)
        sys.exit(CONFIG_EXIT)
    return payload


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # this environment has no httpx2; the httpx-backed client works
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _dispatch(command: str, payload: dict, server: str | None) -> None:
    try:
        client = _client(server)
    except Exception as exc:  # no route to a client at all
        click.echo(f"error: {exc}", err=True)
        sys.exit(RUNTIME_EXIT)
    try:
        response = client.post(_PATHS[command], json=payload)
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(RUNTIME_EXIT)
    finally:
        client.close()
    if response.status_code == 200:
        click.echo(json.dumps(response.json(), indent=2, sort_keys=True))
        return
    try:
        detail = response.json().get("detail", response.text)
    except ValueError:
        detail = response.text
    click.echo(f"error ({response.status_code}): {detail}", err=True)
    sys.exit(CONFIG_EXIT if response.status_code in (400, 422) else RUNTIME_EXIT)


def _common(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(), help="JSON job file")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the config seed")(fn)
    fn = click.option("--out-dir", default="prawn-out", show_default=True, help="directory for output files")(fn)
    fn = click.option("--server", default=None, help="remote service URL (default: run in process)")(fn)
    return fn


def _run(command: str, config_path: str, seed: int | None, out_dir: str, server: str | None, with_seed: bool = True) -> None:
    payload = _load_job(config_path)
    if with_seed:
        payload["seed"] = seed
    payload["out_dir"] = out_dir
    _dispatch(command, payload, server)


@click.group()
def main() -> None:
    """Multi-task training with permission-typed parameters and gradient passing."""


@main.command()
@_common
def train(config_path, seed, out_dir, server):
    """Train a model; writes metrics, summary and a checkpoint."""
    _run("train", config_path, seed, out_dir, server)


@main.command()
@_common
def eval(config_path, seed, out_dir, server):  # noqa: A001 - CLI verb
    """Evaluate a stored checkpoint on dev and test splits."""
    payload = _load_job(config_path)
    payload["seed"] = seed
    _dispatch("eval", payload, server)


@main.command()
@_common
def adapt(config_path, seed, out_dir, server):
    """Fine-tune a checkpoint's shared space on held-out tasks."""
    _run("adapt", config_path, seed, out_dir, server)


@main.command()
@_common
def weights(config_path, seed, out_dir, server):
    """Estimate the task-relatedness weight matrix."""
    _run("weights", config_path, seed, out_dir, server)


@main.group()
def analyze() -> None:
    """Post-hoc analyses of finished runs."""


@analyze.command("pca")
@_common
def analyze_pca(config_path, seed, out_dir, server):
    """Project a logged parameter trajectory onto its principal axes."""
    _run("analyze-pca", config_path, seed, out_dir, server, with_seed=False)


@analyze.command("neurons")
@_common
def analyze_neurons(config_path, seed, out_dir, server):
    """Per-word shared-neuron peak statistics of a text model."""
    _run("analyze-neurons", config_path, seed, out_dir, server)


@main.command("synth-gen")
@_common
def synth_gen(config_path, seed, out_dir, server):
    """Generate a synthetic multi-task corpus and its manifest."""
    _run("synth-gen", config_path, seed, out_dir, server, with_seed=False)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
def serve(host, port):
    """Run the experiment service."""
    import uvicorn

    uvicorn.run("prawn.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
