"""Experiment configuration models.

Everything the CLI and the service accept is specified here as pydantic
models with ``extra="forbid"``, so unknown keys are rejected with a field
path.  ``ExperimentConfig`` is the single source of truth for a run; the
per-command job models wrap it with command-specific inputs.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..commpass import MetaConfig
from ..datakit import SyntheticSpec
from ..readops import EncoderSpec, ReadOpKind
from ..writeops import LossWeights, OptimizerState

MODEL_KINDS = ("FR", "SR", "ASR", "PGP-FR", "PGP-SR", "LGP-FR", "LGP-SR", "single-task")
STAR_FAMILY = ("SR", "ASR", "PGP-SR", "LGP-SR")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(_Model):
    rule: Literal["sgd", "adadelta"] = "sgd"
    lr: float = Field(0.1, gt=0)
    rho: float = Field(0.95, ge=0, lt=1)
    eps: float = Field(1e-6, gt=0)

    def build(self) -> OptimizerState:
        return OptimizerState(rule=self.rule, lr=self.lr, rho=self.rho, eps=self.eps)


class EncoderConfig(_Model):
    kind: Literal["mlp", "bow-mean"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [16])
    activation: Literal["tanh", "relu"] = "tanh"
    embed_dim: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.kind == "bow-mean" and self.embed_dim is None:
            raise ValueError("bow-mean encoder needs embed_dim")
        return self

    def build(self, input_dim: int | None, vocab_size: int | None) -> EncoderSpec:
        if self.kind == "mlp":
            if input_dim is None:
                raise ConfigError("mlp encoder on text data: use kind=bow-mean")
            return EncoderSpec("mlp", (input_dim, *self.hidden), activation=self.activation)
        if vocab_size is None:
            raise ConfigError("bow-mean encoder on vector data: use kind=mlp")
        return EncoderSpec(
            "bow-mean",
            (self.embed_dim, *self.hidden),
            activation=self.activation,
            embed_dim=self.embed_dim,
            vocab_size=vocab_size,
        )


class MetaSettings(_Model):
    alpha: float = Field(0.1, ge=0)
    first_order: bool = False
    shared_update: Literal["gp-plus-task", "gp-only"] = "gp-plus-task"
    partner_seed: int = 0


class LossWeightConfig(_Model):
    task: float = Field(1.0, gt=0)
    adv: float = Field(0.05, ge=0)
    diff: float = Field(0.01, ge=0)
    gp: float = Field(1.0, ge=0)
    grl_lambda: float = Field(1.0, ge=0)

    def build(self) -> LossWeights:
        return LossWeights(task=self.task, adv=self.adv, diff=self.diff, gp=self.gp)


class SyntheticConfig(_Model):
    tasks: int = Field(..., ge=1)
    input_dim: int = Field(..., ge=1)
    num_classes: int = Field(2, ge=2)
    rank: int = Field(2, ge=1)
    private_scale: float = Field(0.0, ge=0)
    label_noise: float = Field(0.0, ge=0, lt=0.5)
    samples_per_task: int = Field(2000, ge=10)
    seed: int = 0
    held_out_tasks: int = Field(0, ge=0)

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            k_tasks=self.tasks,
            input_dim=self.input_dim,
            num_classes=self.num_classes,
            rank=self.rank,
            private_scale=self.private_scale,
            label_noise=self.label_noise,
            samples_per_task=self.samples_per_task,
            seed=self.seed,
        )


class ManifestConfig(_Model):
    path: str
    min_count: int = Field(1, ge=1)
    held_out: list[str] = Field(default_factory=list)


class DataConfig(_Model):
    synthetic: Optional[SyntheticConfig] = None
    manifest: Optional[ManifestConfig] = None
    split_seed: int = 0

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.synthetic is None) == (self.manifest is None):
            raise ValueError("data needs exactly one of 'synthetic' or 'manifest'")
        return self


class AdaptConfig(_Model):
    sample_counts: list[int] = Field(default_factory=lambda: list(range(100, 1001, 100)))
    epochs: int = Field(15, ge=1)

    @model_validator(mode="after")
    def _positive_counts(self):
        if not self.sample_counts or any(n < 1 for n in self.sample_counts):
            raise ValueError("sample_counts must be positive")
        return self


class EstimateConfig(_Model):
    q_exp: float = Field(2.0, gt=0)
    epochs: int = Field(5, ge=1)
    lr: float = Field(0.3, gt=0)


class WeightsConfig(_Model):
    path: Optional[str] = None
    estimate: Optional[EstimateConfig] = None
    q_exp: float = Field(2.0, gt=0)  # used when loading from a file

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.path is None) == (self.estimate is None):
            raise ValueError("weights need exactly one of 'path' or 'estimate'")
        return self


class ExperimentConfig(_Model):
    model: Literal["FR", "SR", "ASR", "PGP-FR", "PGP-SR", "LGP-FR", "LGP-SR", "single-task"]
    data: DataConfig
    epochs: int = Field(10, ge=1)
    seed: int = 0
    batch_size: int = Field(8, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    meta: MetaSettings = Field(default_factory=MetaSettings)
    loss_weights: LossWeightConfig = Field(default_factory=LossWeightConfig)
    shared_encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    private_encoder: Optional[EncoderConfig] = None
    evaluation: Literal["in-task", "out-of-task"] = "in-task"
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    weights: Optional[WeightsConfig] = None
    log_trajectory: bool = False

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.model in STAR_FAMILY and self.private_encoder is None:
            raise ValueError(f"model {self.model} needs a private_encoder")
        if self.model.startswith("LGP") and self.weights is None:
            raise ValueError(f"model {self.model} needs a weights source (path or estimate)")
        return self

    @property
    def read_kind(self) -> ReadOpKind:
        return ReadOpKind.STAR if self.model in STAR_FAMILY else ReadOpKind.FLAT

    @property
    def communication(self) -> str | None:
        if self.model.startswith("PGP"):
            return "pairwise"
        if self.model.startswith("LGP"):
            return "listwise"
        return None

    @property
    def uses_constraints(self) -> bool:
        return self.model == "ASR"

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            alpha=self.meta.alpha,
            first_order=self.meta.first_order,
            communication=self.communication,
            shared_update=self.meta.shared_update,
            partner_seed=self.meta.partner_seed,
        )


# ---------------------------------------------------------------------------
# per-command job payloads


class TrainJob(_Model):
    experiment: ExperimentConfig


class EvalJob(_Model):
    experiment: ExperimentConfig
    checkpoint: str


class AdaptJob(_Model):
    experiment: ExperimentConfig
    checkpoint: str

    @model_validator(mode="after")
    def _adaptable(self):
        if self.experiment.model == "single-task":
            raise ValueError("adapt needs a multi-task checkpoint with a shared space")
        return self


class WeightsJob(_Model):
    experiment: ExperimentConfig

    @model_validator(mode="after")
    def _estimate_present(self):
        if self.experiment.weights is None or self.experiment.weights.estimate is None:
            raise ValueError("weights command needs experiment.weights.estimate settings")
        return self


class PcaJob(_Model):
    trajectory: str
    dims: int = Field(3, ge=1)


class NeuronsJob(_Model):
    experiment: ExperimentConfig
    checkpoint: str
    top_k: int = Field(10, ge=1)


class SynthGenJob(_Model):
    synthetic: SyntheticConfig


JOB_MODELS = {
    "train": TrainJob,
    "eval": EvalJob,
    "adapt": AdaptJob,
    "weights": WeightsJob,
    "analyze-pca": PcaJob,
    "analyze-neurons": NeuronsJob,
    "synth-gen": SynthGenJob,
}


def parse_job(command: str, payload: dict):
    """Validate a raw job dict for a command; raises ConfigError with the
    pydantic field paths on failure."""
    model = JOB_MODELS.get(command)
    if model is None:
        raise ConfigError(f"unknown command {command!r}")
    try:
        return model.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
