"""Gradient-passing communication between tasks.

A sender task turns the gradient of its own loss w.r.t. the shared
parameters into a substitute shared assignment (fast weights, one SGD step
at rate ``alpha``); the receiver evaluates its loss under that assignment.
Minimising the receiver's loss w.r.t. the *original* shared parameters
pushes shared updates toward directions that survive other tasks' use.

In second-order mode the fast weights stay differentiable, so the gradient
carries the through-the-inner-step term; the first-order flag detaches the
sender's gradient before the subtraction.  The sender's private parameters
are evaluated as constants when its message gradient is computed, so no
task's private parameters are ever reachable from another task's
communication loss.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .datakit import Batch, TaskDataset, batch_iter, draw_batch
from .readops import EncoderSpec, MultiTaskModel, ReadOpKind
from .registry import ParamMode, ParamRegistry
from .tensor import Tensor, backward, no_grad
from .writeops import LossWeights, OptimizerState, adversarial_loss, orthogonality_loss, step, task_loss


class CommError(ValueError):
    """Invalid communication call (bad keys, same-task pairing, ...)."""


class EstimationError(ValueError):
    """Relatedness-weight estimation hit a degenerate accuracy matrix."""


@dataclass
class FastWeights:
    """Substitute shared parameter assignment produced from one gradient step."""

    values: dict[str, Tensor]
    source_task: str = ""
    alpha: float = 0.0
    first_order: bool = False


@dataclass(frozen=True)
class MetaConfig:
    """Settings of the gradient-passing loop."""

    alpha: float = 0.1
    first_order: bool = False
    communication: str | None = None  # None | "pairwise" | "listwise"
    shared_update: str = "gp-plus-task"  # or "gp-only"
    partner_seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise CommError("meta config: alpha must be non-negative")
        if self.communication not in (None, "pairwise", "listwise"):
            raise CommError(f"meta config: unknown communication mode {self.communication!r}")
        if self.shared_update not in ("gp-plus-task", "gp-only"):
            raise CommError(f"meta config: unknown shared-update policy {self.shared_update!r}")


def compute_fast_weights(
    registry: ParamRegistry,
    shared_grads: Mapping[str, Tensor],
    alpha: float,
    first_order: bool = False,
    source_task: str = "",
) -> FastWeights:
    """One simulated SGD step on the shared parameters.

    Parameters missing from ``shared_grads`` (unreachable, gradient exactly
    zero) and the ``alpha == 0`` case map to the stored tensors themselves,
    keeping the identity exact to the bit.
    """
    if alpha < 0:
        raise CommError("fast weights: alpha must be non-negative")
    shared = registry.shared_map()
    for key in shared_grads:
        if key not in shared:
            raise CommError(f"fast weights: {key!r} is not a shared parameter")
    values: dict[str, Tensor] = {}
    for pid, theta in shared.items():
        grad = shared_grads.get(pid)
        if grad is None or alpha == 0.0:
            values[pid] = theta
        else:
            g = grad.detach() if first_order else grad
            values[pid] = T.sub(theta, T.smul(g, alpha))
    return FastWeights(values=values, source_task=source_task, alpha=alpha, first_order=first_order)


def send_gradients(model: MultiTaskModel, task_id: str, batch: Batch, alpha: float, first_order: bool = False) -> FastWeights:
    """Fast weights from one task's loss gradient on one batch.

    The sender's private parameters are read as constants here, which is
    what keeps them unreachable from any receiver-side loss.
    """
    if len(batch) == 0:
        raise CommError("send_gradients: empty batch")
    result = model.read(task_id, batch.inputs, private_detached=True)
    loss = task_loss(result, batch.labels)
    grads = backward(loss, model.shared_map(), retain_graph=not first_order)
    return compute_fast_weights(model.registry, grads, alpha, first_order, source_task=task_id)


def pairwise_gp_loss(
    model: MultiTaskModel,
    task_k: str,
    batch_k: Batch,
    task_j: str,
    batch_j: Batch,
    alpha: float,
    *,
    first_order: bool = False,
) -> Tensor:
    """Receiver ``j``'s loss under fast weights sent by ``k``.

    Differentiable w.r.t. the shared parameters; with ``alpha == 0`` it
    equals the receiver's plain loss exactly.
    """
    if task_j == task_k:
        raise CommError("gradient passing needs two distinct tasks")
    if len(batch_j) == 0:
        raise CommError("pairwise_gp_loss: empty partner batch")
    fw = send_gradients(model, task_k, batch_k, alpha, first_order)
    out = model.read(task_j, batch_j.inputs, override=fw.values)
    return task_loss(out, batch_j.labels)


def listwise_gp_loss(
    model: MultiTaskModel,
    task_k: str,
    batch_k: Batch,
    partner_batches: Mapping[str, Batch],
    beta_row: Mapping[str, float],
    alpha: float,
    *,
    first_order: bool = False,
) -> Tensor:
    """Relatedness-weighted sum of the pairwise losses over all partners.

    One gradient message is computed and evaluated on every partner batch;
    partners with weight zero are skipped (their term is exactly zero).
    """
    partners = [tid for tid in model.task_ids if tid != task_k]
    active = [j for j in partners if float(beta_row.get(j, 0.0)) != 0.0]
    missing = [j for j in active if j not in partner_batches]
    if missing:
        raise CommError(f"listwise_gp_loss: missing partner batch for {missing}")
    if not active:
        return Tensor(0.0)
    fw = send_gradients(model, task_k, batch_k, alpha, first_order)
    total: Tensor | None = None
    for j in active:
        out = model.read(j, partner_batches[j].inputs, override=fw.values)
        term = T.smul(task_loss(out, partner_batches[j].labels), float(beta_row[j]))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# relatedness weights


@dataclass(frozen=True)
class WeightMatrix:
    """K x K task-relatedness weights derived from cross-task accuracies."""

    task_ids: tuple[str, ...]
    values: np.ndarray
    q_exp: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "task_ids", tuple(self.task_ids))
        k = len(self.task_ids)
        if vals.shape != (k, k):
            raise EstimationError(f"weight matrix shape {vals.shape} != ({k}, {k})")
        if self.q_exp <= 0:
            raise EstimationError("weight matrix: q_exp must be positive")
        if not np.all(np.diag(vals) == 1.0):
            raise EstimationError("weight matrix: diagonal must be exactly 1")
        off = vals[~np.eye(k, dtype=bool)]
        if off.size and (off.min() <= 0.0 or off.max() > 1.0):
            raise EstimationError("weight matrix: off-diagonal entries must lie in (0, 1]")

    def row(self, task_id: str) -> dict[str, float]:
        i = self.task_ids.index(task_id)
        return {tid: float(self.values[i, j]) for j, tid in enumerate(self.task_ids) if j != i}

    @classmethod
    def from_cross_accuracy(cls, accuracy: np.ndarray, task_ids: Sequence[str], q_exp: float) -> "WeightMatrix":
        """Column-normalised, clipped and exponent-flattened accuracies.

        ``accuracy[i, j]`` is task ``j``'s test accuracy under the model
        trained on task ``i``; each column is divided by its own-task
        diagonal, clipped at 1, and raised to ``1/q_exp``.
        """
        acc = np.asarray(accuracy, dtype=np.float64)
        k = len(task_ids)
        if acc.shape != (k, k):
            raise EstimationError(f"accuracy matrix shape {acc.shape} != ({k}, {k})")
        if q_exp <= 0:
            raise EstimationError("q_exp must be positive")
        beta = np.ones((k, k))
        for j in range(k):
            if acc[j, j] == 0.0:
                raise EstimationError(f"degenerate diagonal: task {task_ids[j]!r} has zero own accuracy")
            for i in range(k):
                if i == j:
                    continue
                v = min(acc[i, j] / acc[j, j], 1.0)
                if v <= 0.0:
                    raise EstimationError(f"degenerate cross accuracy for ({task_ids[i]!r}, {task_ids[j]!r})")
                beta[i, j] = v ** (1.0 / q_exp)
        return cls(task_ids=tuple(task_ids), values=beta, q_exp=q_exp)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task_id", *self.task_ids])
            for tid, row in zip(self.task_ids, self.values):
                writer.writerow([tid, *[f"{v:.6f}" for v in row]])

    @classmethod
    def from_csv(cls, path, q_exp: float = 1.0) -> "WeightMatrix":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:1] != ["task_id"]:
            raise EstimationError(f"{path}: not a weight-matrix CSV")
        task_ids = rows[0][1:]
        values = []
        for row in rows[1:]:
            if len(row) != len(task_ids) + 1:
                raise EstimationError(f"{path}: ragged row {row!r}")
            values.append([float(v) for v in row[1:]])
        return cls(task_ids=tuple(task_ids), values=np.array(values), q_exp=q_exp)


@dataclass(frozen=True)
class BaseTrainConfig:
    """Settings for the throwaway per-task models behind weight estimation."""

    encoder: EncoderSpec
    epochs: int = 5
    batch_size: int = 8
    optimizer_rule: str = "sgd"
    lr: float = 0.1
    seed: int = 0


def _analysis_workers(upper: int) -> int:
    cap = int(os.environ.get("PRAWN_THREADS", "1"))
    return max(1, min(upper, cap))


def estimate_weight_matrix(
    task_splits: Mapping[str, Mapping[str, TaskDataset]],
    base: BaseTrainConfig,
    q_exp: float,
) -> WeightMatrix:
    """Cross-task accuracy matrix from per-task base models.

    For each task a fresh single-task model (own registry, flat wiring) is
    trained on that task's train split and evaluated on every task's test
    split; tasks must share one label space.  Base models are independent,
    so they may train concurrently up to the PRAWN_THREADS cap.
    """
    task_ids = sorted(task_splits)
    k = len(task_ids)
    if k < 2:
        raise EstimationError("weight estimation needs at least 2 tasks")
    classes = {task_splits[tid]["train"].num_classes for tid in task_ids}
    if len(classes) != 1:
        raise EstimationError(f"weight estimation needs one shared label space, got sizes {sorted(classes)}")

    accuracy = np.zeros((k, k))

    def fill_row(i: int) -> None:
        tid = task_ids[i]
        registry = ParamRegistry()
        model = MultiTaskModel(
            registry,
            ReadOpKind.FLAT,
            {tid: task_splits[tid]["train"].num_classes},
            base.encoder,
            init_seed=base.seed + i,
        )
        optimizer = OptimizerState(rule=base.optimizer_rule, lr=base.lr)
        meta = MetaConfig(communication=None)
        for epoch in range(base.epochs):
            train_epoch(
                meta,
                registry,
                model,
                {tid: task_splits[tid]["train"]},
                optimizer,
                LossWeights(),
                epoch=epoch,
                data_seed=base.seed + i,
            )
        for j, other in enumerate(task_ids):
            # the single-task read-op runs on any same-shaped inputs
            accuracy[i, j] = evaluate(model, tid, task_splits[other]["test"], base.batch_size)[1]

    workers = _analysis_workers(k)
    if workers == 1:
        for i in range(k):
            fill_row(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(k)))

    return WeightMatrix.from_cross_accuracy(accuracy, task_ids, q_exp)


# ---------------------------------------------------------------------------
# training loop


def evaluate(model: MultiTaskModel, task_id: str, dataset: TaskDataset, batch_size: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) of a task on a dataset, without graph recording."""
    total_ce = 0.0
    correct = 0
    n = len(dataset)
    with no_grad():
        for start in range(0, n, batch_size):
            batch = dataset.take(np.arange(start, min(start + batch_size, n)))
            result = model.read(task_id, batch.inputs)
            ce = T.softmax_cross_entropy(result.logits, batch.labels)
            total_ce += float(ce.data.sum())
            correct += int((np.argmax(result.logits.data, axis=1) == batch.labels).sum())
    return total_ce / n, correct / n


def train_epoch(
    meta: MetaConfig,
    registry: ParamRegistry,
    model: MultiTaskModel,
    train_sets: Mapping[str, TaskDataset],
    optimizer: OptimizerState,
    weights: LossWeights,
    *,
    epoch: int,
    data_seed: int,
    batch_size: int = 8,
    partner_rng: np.random.Generator | None = None,
    beta: WeightMatrix | None = None,
    grl_lambda: float = 1.0,
) -> dict[str, dict[str, float]]:
    """One pass over every task's training batches in interleaved order.

    Without communication this is plain constrained multi-task training:
    one backward over the write loss, one optimizer step per batch.  With
    communication the task's private parameters step on the task loss while
    the shared parameters step on the communication loss (plus the task
    loss under the gp-plus-task policy).  Partner batches come from an rng
    stream separate from batch scheduling, so enabling communication does
    not perturb the data order.
    """
    task_ids = sorted(train_sets)
    if meta.communication is not None and len(task_ids) < 2:
        raise CommError("gradient passing needs at least 2 tasks")
    if meta.communication == "listwise" and beta is None:
        raise CommError("listwise communication needs a weight matrix")
    if meta.communication is not None and partner_rng is None:
        partner_rng = np.random.default_rng([meta.partner_seed, epoch])

    schedule: list[tuple[str, Batch]] = []
    for idx, tid in enumerate(task_ids):
        for batch in batch_iter(train_sets[tid], batch_size, seed=data_seed + idx, epoch=epoch):
            schedule.append((tid, batch))
    order = np.random.default_rng([data_seed, epoch, 977]).permutation(len(schedule))

    sums = {tid: {"loss": 0.0, "correct": 0, "count": 0} for tid in task_ids}
    task_index = {tid: i for i, tid in enumerate(model.task_ids)}

    for pos in order:
        tid, batch = schedule[pos]
        result = model.read(tid, batch.inputs)
        l_task = task_loss(result, batch.labels)
        write_loss = T.smul(l_task, weights.task)
        if model.has_discriminator:
            disc = tuple(model.registry.get(pid).tensor for pid in model.discriminator_ids)
            ids = np.full(len(batch), task_index[tid], dtype=np.int64)
            write_loss = T.add(write_loss, T.smul(adversarial_loss(result.shared_features, ids, disc, grl_lambda), weights.adv))
            if result.private_features is not None:
                write_loss = T.add(write_loss, T.smul(orthogonality_loss(result.shared_features, result.private_features), weights.diff))

        if meta.communication is None:
            grads = backward(write_loss, registry.tensor_map(registry.writable_view(tid)))
            step(optimizer, registry, tid, grads)
        else:
            private_grads = backward(write_loss, model.private_map(tid), retain_graph=True)
            gp = _communication_loss(meta, model, tid, batch, train_sets, partner_rng, beta, batch_size)
            if meta.shared_update == "gp-plus-task":
                shared_scalar = T.add(write_loss, T.smul(gp, weights.gp))
            else:
                shared_scalar = T.smul(gp, weights.gp)
            shared_grads = backward(shared_scalar, model.shared_map())
            step(optimizer, registry, tid, private_grads)
            if shared_grads:
                step(optimizer, registry, tid, shared_grads)

        sums[tid]["loss"] += l_task.item() * len(batch)
        sums[tid]["correct"] += int((np.argmax(result.logits.data, axis=1) == batch.labels).sum())
        sums[tid]["count"] += len(batch)

    return {
        tid: {"loss": s["loss"] / s["count"], "accuracy": s["correct"] / s["count"]}
        for tid, s in sums.items()
        if s["count"]
    }


def _communication_loss(
    meta: MetaConfig,
    model: MultiTaskModel,
    task_k: str,
    batch_k: Batch,
    train_sets: Mapping[str, TaskDataset],
    partner_rng: np.random.Generator,
    beta: WeightMatrix | None,
    batch_size: int,
) -> Tensor:
    partners = [tid for tid in sorted(train_sets) if tid != task_k]
    if meta.communication == "pairwise":
        # a single candidate needs no rng draw, keeping streams aligned
        # with the equivalent one-hot listwise run
        task_j = partners[0] if len(partners) == 1 else partners[int(partner_rng.integers(len(partners)))]
        batch_j = draw_batch(train_sets[task_j], batch_size, partner_rng)
        return pairwise_gp_loss(model, task_k, batch_k, task_j, batch_j, meta.alpha, first_order=meta.first_order)
    row = beta.row(task_k)
    partner_batches = {
        j: draw_batch(train_sets[j], batch_size, partner_rng) for j in partners if float(row.get(j, 0.0)) != 0.0
    }
    return listwise_gp_loss(model, task_k, batch_k, partner_batches, row, meta.alpha, first_order=meta.first_order)
