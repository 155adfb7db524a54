"""Request and response bodies of the service endpoints.

Requests are the per-command job payloads plus a seed override and an
output directory; responses carry the key numbers plus the paths of every
file the run wrote.  Unknown request keys are rejected.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from ..harness.config import (
    AdaptJob,
    EvalJob,
    NeuronsJob,
    PcaJob,
    SynthGenJob,
    TrainJob,
    WeightsJob,
)


class _Response(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainRequest(TrainJob):
    seed: Optional[int] = None
    out_dir: str = "prawn-out"


class TrainResponse(_Response):
    final_test_accuracy: dict[str, float]
    final_dev_accuracy: dict[str, float]
    best_epoch: dict[str, int]
    adapt_curves: dict[str, dict[int, float]] = Field(default_factory=dict)
    checkpoints: dict[str, str] = Field(default_factory=dict)
    files: dict[str, str] = Field(default_factory=dict)
    wall_clock_seconds: float


class EvalRequest(EvalJob):
    seed: Optional[int] = None


class EvalResponse(_Response):
    metrics: dict[str, dict[str, float]]


class AdaptRequest(AdaptJob):
    seed: Optional[int] = None
    out_dir: str = "prawn-out"


class AdaptResponse(_Response):
    curves: dict[str, dict[int, float]]
    files: dict[str, str] = Field(default_factory=dict)


class WeightsRequest(WeightsJob):
    seed: Optional[int] = None
    out_dir: str = "prawn-out"


class WeightsResponse(_Response):
    task_ids: list[str]
    values: list[list[float]]
    q_exp: float
    files: dict[str, str] = Field(default_factory=dict)


class PcaRequest(PcaJob):
    out_dir: str = "prawn-out"


class PcaResponse(_Response):
    variances: dict[str, list[float]]
    joint: bool
    warnings: list[str]
    files: dict[str, str] = Field(default_factory=dict)


class NeuronsRequest(NeuronsJob):
    seed: Optional[int] = None
    out_dir: str = "prawn-out"


class WordScore(_Response):
    word: str
    part: str
    occurrences: int
    peak_count: int
    score: float


class NeuronsResponse(_Response):
    layer_width: int
    n_sequences: int
    total_increments: int
    top_intersection: list[WordScore]
    top_complement: list[WordScore]
    files: dict[str, str] = Field(default_factory=dict)


class SynthGenRequest(SynthGenJob):
    out_dir: str = "prawn-out"


class SynthGenResponse(_Response):
    manifest: str
    task_count: int
    files: dict[str, str] = Field(default_factory=dict)


class HealthResponse(_Response):
    status: str
    version: str
