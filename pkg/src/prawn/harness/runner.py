"""Experiment runner: the model zoo, evaluation protocols, and file outputs.

A run is fully determined by its config and seed: data generation, batch
scheduling, partner sampling and parameter init all draw from separate
seeded streams, so repeated runs write byte-identical metrics and
checkpoints.  Model selection is by best mean dev accuracy; the returned
test numbers come from the restored best snapshot.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .. import datakit as dk
from ..commpass import (
    BaseTrainConfig,
    MetaConfig,
    WeightMatrix,
    estimate_weight_matrix,
    evaluate,
    train_epoch,
)
from ..readops import MultiTaskModel, ReadOpKind
from ..registry import ParamMode, ParamRegistry, load_checkpoint_values, save_checkpoint
from .analysis import TrajectoryLog, trajectory_groups
from .config import ConfigError, ExperimentConfig

Splits = dict[str, dk.TaskDataset]


@dataclass
class TaskData:
    """Everything a run needs to know about its datasets."""

    in_task: dict[str, Splits]
    held_out: dict[str, Splits]
    input_dim: int | None
    vocab: dk.Vocab | None = None
    partition: dk.VocabPartition | None = None

    @property
    def is_text(self) -> bool:
        return self.vocab is not None


@dataclass
class RunResult:
    rows: list[dict]
    final_test: dict[str, float]
    final_dev: dict[str, float]
    best_epoch: dict[str, int]
    wall_clock: float
    adapt_curves: dict[str, dict[int, float]] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    beta: WeightMatrix | None = None


# ---------------------------------------------------------------------------
# data assembly


def build_task_data(config: ExperimentConfig) -> TaskData:
    data = config.data
    if data.synthetic is not None:
        syn = data.synthetic
        spec = syn.spec()
        indices = list(range(syn.tasks + syn.held_out_tasks))
        datasets = dk.gen_synthetic(spec, task_indices=indices)
        in_task, held_out = {}, {}
        for idx, ds in zip(indices, datasets):
            splits = dict(zip(("train", "dev", "test"), dk.split(ds, seed=data.split_seed * 100003 + idx)))
            (in_task if idx < syn.tasks else held_out)[ds.task_id] = splits
        return TaskData(in_task=in_task, held_out=held_out, input_dim=syn.input_dim)

    tasks, vocab, partition = dk.load_manifest(data.manifest.path, min_count=data.manifest.min_count)
    held_names = set(data.manifest.held_out)
    missing = held_names - set(tasks)
    if missing:
        raise ConfigError(f"held_out tasks not in manifest: {sorted(missing)}")
    in_task, held_out = {}, {}
    for idx, (tid, ds) in enumerate(sorted(tasks.items())):
        splits = dict(zip(("train", "dev", "test"), dk.split(ds, seed=data.split_seed * 100003 + idx)))
        (held_out if tid in held_names else in_task)[tid] = splits
    if not in_task:
        raise ConfigError("manifest leaves no in-task training tasks")
    input_dim = None
    if vocab is None:
        any_train = next(iter(in_task.values()))["train"]
        input_dim = int(any_train.inputs.shape[1])
    return TaskData(in_task=in_task, held_out=held_out, input_dim=input_dim, vocab=vocab, partition=partition)


def build_model(config: ExperimentConfig, data: TaskData, task_classes: Mapping[str, int], seed: int) -> tuple[ParamRegistry, MultiTaskModel]:
    vocab_size = len(data.vocab) if data.vocab is not None else None
    shared = config.shared_encoder.build(data.input_dim, vocab_size)
    private = None
    if config.read_kind is ReadOpKind.STAR:
        private = config.private_encoder.build(data.input_dim, vocab_size)
    registry = ParamRegistry()
    model = MultiTaskModel(
        registry,
        config.read_kind,
        dict(task_classes),
        shared,
        private,
        discriminator=config.uses_constraints,
        init_seed=seed,
    )
    return registry, model


# ---------------------------------------------------------------------------
# weights for list-wise runs


def resolve_weight_matrix(config: ExperimentConfig, data: TaskData, seed: int) -> WeightMatrix | None:
    if config.communication != "listwise":
        return None
    wcfg = config.weights
    if wcfg.path is not None:
        beta = WeightMatrix.from_csv(wcfg.path, q_exp=wcfg.q_exp)
        if set(beta.task_ids) != set(data.in_task):
            raise ConfigError(f"weight matrix tasks {sorted(beta.task_ids)} do not match training tasks {sorted(data.in_task)}")
        return beta
    return estimate_weights(config, data, seed)


def estimate_weights(config: ExperimentConfig, data: TaskData, seed: int) -> WeightMatrix:
    est = config.weights.estimate
    vocab_size = len(data.vocab) if data.vocab is not None else None
    base = BaseTrainConfig(
        encoder=config.shared_encoder.build(data.input_dim, vocab_size),
        epochs=est.epochs,
        batch_size=config.batch_size,
        optimizer_rule=config.optimizer.rule,
        lr=est.lr,
        seed=seed,
    )
    return estimate_weight_matrix(data.in_task, base, est.q_exp)


# ---------------------------------------------------------------------------
# training


def _eval_rows(model, splits_by_task: Mapping[str, Splits], epoch: int) -> tuple[list[dict], float]:
    rows = []
    dev_accs = []
    for tid in sorted(splits_by_task):
        for split_name in ("train", "dev", "test"):
            loss, acc = evaluate(model, tid, splits_by_task[tid][split_name])
            rows.append({"epoch": epoch, "task": tid, "split": split_name, "loss": loss, "accuracy": acc})
            if split_name == "dev":
                dev_accs.append(acc)
    return rows, float(np.mean(dev_accs))


def _train_tasks(
    config: ExperimentConfig,
    registry: ParamRegistry,
    model: MultiTaskModel,
    splits_by_task: Mapping[str, Splits],
    seed: int,
    beta: WeightMatrix | None,
    trajectory: TrajectoryLog | None,
) -> tuple[list[dict], int]:
    """Epoch loop with best-dev snapshotting; leaves the registry at the best."""
    train_sets = {tid: s["train"] for tid, s in splits_by_task.items()}
    optimizer = config.optimizer.build()
    meta = config.meta_config()
    partner_rng = np.random.default_rng([seed, meta.partner_seed]) if meta.communication else None
    rows: list[dict] = []
    best_acc, best_epoch, best_snap = -1.0, -1, None
    for epoch in range(config.epochs):
        train_epoch(
            meta,
            registry,
            model,
            train_sets,
            optimizer,
            config.loss_weights.build(),
            epoch=epoch,
            data_seed=seed,
            batch_size=config.batch_size,
            partner_rng=partner_rng,
            beta=beta,
            grl_lambda=config.loss_weights.grl_lambda,
        )
        epoch_rows, mean_dev = _eval_rows(model, splits_by_task, epoch)
        rows.extend(epoch_rows)
        if mean_dev > best_acc:
            best_acc, best_epoch, best_snap = mean_dev, epoch, registry.snapshot()
        if trajectory is not None:
            trajectory.append(epoch, trajectory_groups(registry))
    registry.restore(best_snap)
    return rows, best_epoch


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, seed: int | None = None) -> RunResult:
    """Train per the config, select on dev, report test; write artifacts
    when ``out_dir`` is given."""
    t0 = time.perf_counter()
    seed = config.seed if seed is None else seed
    data = build_task_data(config)
    if config.communication is not None and len(data.in_task) < 2:
        raise ConfigError(f"model {config.model} needs at least 2 training tasks")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = RunResult(rows=[], final_test={}, final_dev={}, best_epoch={}, wall_clock=0.0)
    trajectory = TrajectoryLog() if config.log_trajectory else None

    if config.model == "single-task":
        for tid in sorted(data.in_task):
            splits = {tid: data.in_task[tid]}
            registry, model = build_model(config, data, {tid: splits[tid]["train"].num_classes}, seed)
            rows, best_epoch = _train_tasks(config, registry, model, splits, seed, None, trajectory)
            result.rows.extend(rows)
            result.best_epoch[tid] = best_epoch
            result.final_dev[tid] = evaluate(model, tid, splits[tid]["dev"])[1]
            result.final_test[tid] = evaluate(model, tid, splits[tid]["test"])[1]
            if out is not None:
                path = out / f"checkpoint-{tid}.bin"
                save_checkpoint(registry, path)
                result.checkpoints[tid] = str(path)
    else:
        task_classes = {tid: s["train"].num_classes for tid, s in data.in_task.items()}
        registry, model = build_model(config, data, task_classes, seed)
        beta = resolve_weight_matrix(config, data, seed)
        result.beta = beta
        rows, best_epoch = _train_tasks(config, registry, model, data.in_task, seed, beta, trajectory)
        result.rows.extend(rows)
        for tid in sorted(data.in_task):
            result.best_epoch[tid] = best_epoch
            result.final_dev[tid] = evaluate(model, tid, data.in_task[tid]["dev"])[1]
            result.final_test[tid] = evaluate(model, tid, data.in_task[tid]["test"])[1]
        if out is not None:
            path = out / "checkpoint.bin"
            save_checkpoint(registry, path)
            result.checkpoints["joint"] = str(path)
            if beta is not None:
                beta_path = out / "beta.csv"
                beta.to_csv(beta_path)
                result.files["beta"] = str(beta_path)

    if config.evaluation == "out-of-task":
        if not data.held_out:
            raise ConfigError("out-of-task evaluation needs held-out tasks in the data config")
        if config.model == "single-task":
            raise ConfigError("out-of-task evaluation needs a multi-task model")
        ckpt = result.checkpoints.get("joint")
        if ckpt is None:
            # no out_dir: snapshot through a temporary in-memory path is not
            # possible for the adapt protocol, which rebuilds fresh models
            raise ConfigError("out-of-task evaluation needs an out_dir for the checkpoint")
        for tid in sorted(data.held_out):
            result.adapt_curves[tid] = out_of_task_adapt(
                config, ckpt, data, tid, config.adapt.sample_counts, seed
            )

    result.wall_clock = time.perf_counter() - t0
    if out is not None:
        _write_outputs(result, trajectory, out)
    return result


def out_of_task_adapt(
    config: ExperimentConfig,
    checkpoint_path: str | Path,
    data: TaskData,
    task_id: str,
    sample_counts: list[int],
    seed: int,
) -> dict[int, float]:
    """Fine-tune trained shared parameters plus fresh task parameters on N
    samples of an unseen task, for each N; returns accuracy per N.

    Every count restarts from the checkpoint with a freshly initialised
    private set; all parameters (shared included) train during adaptation.
    """
    splits = data.held_out.get(task_id) or data.in_task.get(task_id)
    if splits is None:
        raise ConfigError(f"unknown adaptation task {task_id!r}")
    train, test = splits["train"], splits["test"]
    curve: dict[int, float] = {}
    for count in sample_counts:
        if count < 1:
            raise ConfigError(f"adaptation sample count {count} must be positive")
        if count > len(train):
            raise ConfigError(f"adaptation sample count {count} exceeds the {len(train)} available training samples")
        registry, model = build_model(config, data, {task_id: train.num_classes}, seed=_mix(seed, count))
        shared_ids = [pt.id for pt in registry.params(ParamMode.SWR) if not pt.id.startswith("shared.disc")]
        load_checkpoint_values(registry, checkpoint_path, param_ids=shared_ids)
        idx = np.random.default_rng([seed, 17, count]).permutation(len(train))[:count]
        subset = train.subset(idx, split="train")
        optimizer = config.optimizer.build()
        for epoch in range(config.adapt.epochs):
            train_epoch(
                MetaConfig(communication=None),
                registry,
                model,
                {task_id: subset},
                optimizer,
                config.loss_weights.build(),
                epoch=epoch,
                data_seed=_mix(seed, count),
                batch_size=config.batch_size,
            )
        curve[count] = evaluate(model, task_id, test)[1]
    return curve


def _mix(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# evaluation of stored checkpoints


def eval_checkpoint(config: ExperimentConfig, checkpoint: str | Path, seed: int | None = None) -> dict[str, dict[str, float]]:
    """Rebuild the model from the config, load stored values, and report
    dev and test accuracy per task."""
    seed = config.seed if seed is None else seed
    data = build_task_data(config)
    out: dict[str, dict[str, float]] = {}
    if config.model == "single-task":
        ckpt_dir = Path(checkpoint)
        if not ckpt_dir.is_dir():
            raise ConfigError("single-task eval takes the run directory holding checkpoint-<task>.bin files")
        for tid in sorted(data.in_task):
            registry, model = build_model(config, data, {tid: data.in_task[tid]["train"].num_classes}, seed)
            load_checkpoint_values(registry, ckpt_dir / f"checkpoint-{tid}.bin")
            out[tid] = _split_metrics(model, tid, data.in_task[tid])
        return out
    task_classes = {tid: s["train"].num_classes for tid, s in data.in_task.items()}
    registry, model = build_model(config, data, task_classes, seed)
    load_checkpoint_values(registry, checkpoint)
    for tid in sorted(data.in_task):
        out[tid] = _split_metrics(model, tid, data.in_task[tid])
    return out


def _split_metrics(model, tid, splits) -> dict[str, float]:
    dev_loss, dev_acc = evaluate(model, tid, splits["dev"])
    test_loss, test_acc = evaluate(model, tid, splits["test"])
    return {"dev_loss": dev_loss, "dev_accuracy": dev_acc, "test_loss": test_loss, "test_accuracy": test_acc}


# ---------------------------------------------------------------------------
# synthetic corpus generation


def generate_synthetic_corpus(syn_config, out_dir: str | Path) -> dict[str, str]:
    """Write one npz per task plus a manifest; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = syn_config.spec()
    indices = list(range(syn_config.tasks + syn_config.held_out_tasks))
    datasets = dk.gen_synthetic(spec, task_indices=indices)
    entries = []
    for ds in datasets:
        fname = f"{ds.task_id}.npz"
        dk.save_npz_task(ds, out / fname)
        entries.append(
            {"task_id": ds.task_id, "path": fname, "format": "npz", "num_classes": ds.num_classes, "count": len(ds)}
        )
    manifest = out / "manifest.json"
    dk.write_manifest(manifest, entries)
    return {"manifest": str(manifest), "tasks": str(out)}


# ---------------------------------------------------------------------------
# file outputs


def _write_outputs(result: RunResult, trajectory: TrajectoryLog | None, out: Path) -> None:
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for row in result.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    result.files["metrics"] = str(metrics_path)

    summary = {
        "final_test_accuracy": result.final_test,
        "final_dev_accuracy": result.final_dev,
        "best_epoch": result.best_epoch,
        "adapt_curves": {tid: {str(k): v for k, v in curve.items()} for tid, curve in result.adapt_curves.items()},
        "checkpoints": result.checkpoints,
        "wall_clock_seconds": result.wall_clock,
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result.files["summary"] = str(summary_path)

    if result.adapt_curves:
        adapt_path = out / "adapt.csv"
        with open(adapt_path, "w", encoding="utf-8") as fh:
            fh.write("task,samples,accuracy\n")
            for tid in sorted(result.adapt_curves):
                for count in sorted(result.adapt_curves[tid]):
                    fh.write(f"{tid},{count},{result.adapt_curves[tid][count]:.6f}\n")
        result.files["adapt"] = str(adapt_path)

    if trajectory is not None and trajectory.epochs:
        traj_path = out / "trajectory.npz"
        trajectory.save_npz(traj_path)
        result.files["trajectory"] = str(traj_path)
