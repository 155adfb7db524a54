"""Synthetic multi-task generators and small text-classification corpora.

Datasets are immutable after construction.  Vector tasks share a hidden
labelling matrix perturbed per task, which gives ground-truth shared
structure for transfer experiments; text tasks come from ``label<TAB>text``
files over a joint vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data or invalid generator/split arguments."""


@dataclass(frozen=True)
class Batch:
    """A slice of one task's samples."""

    inputs: object  # np.ndarray [n, dim] or tuple of token-id tuples
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TaskDataset:
    """One task's samples with label-space size and split tag."""

    task_id: str
    inputs: object  # np.ndarray [n, dim] or tuple of token-id tuples
    labels: np.ndarray
    num_classes: int
    split: str = "all"
    sample_ids: np.ndarray = field(default=None)  # original indices; set in __post_init__

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        n = len(labels)
        if self.is_text:
            object.__setattr__(self, "inputs", tuple(tuple(int(t) for t in seq) for seq in self.inputs))
            if any(len(seq) == 0 for seq in self.inputs):
                raise DataError(f"{self.task_id}: empty token sequence")
        else:
            object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        if len(self.inputs) != n:
            raise DataError(f"{self.task_id}: {len(self.inputs)} inputs vs {n} labels")
        if self.num_classes < 2:
            raise DataError(f"{self.task_id}: need at least 2 classes")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"{self.task_id}: labels outside [0, {self.num_classes})")
        ids = self.sample_ids if self.sample_ids is not None else np.arange(n)
        object.__setattr__(self, "sample_ids", np.asarray(ids, dtype=np.int64))
        if len(self.sample_ids) != n:
            raise DataError(f"{self.task_id}: sample id count mismatch")

    @property
    def is_text(self) -> bool:
        # vector inputs must arrive as ndarrays; any sequence is token ids
        return not isinstance(self.inputs, np.ndarray)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        if self.is_text:
            inputs = tuple(self.inputs[i] for i in idx)
        else:
            inputs = self.inputs[idx]
        return Batch(inputs=inputs, labels=self.labels[idx], sample_ids=self.sample_ids[idx])

    def subset(self, indices, split: str | None = None) -> "TaskDataset":
        batch = self.take(indices)
        return TaskDataset(
            task_id=self.task_id,
            inputs=batch.inputs,
            labels=batch.labels,
            num_classes=self.num_classes,
            split=split or self.split,
            sample_ids=batch.sample_ids,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for related classification tasks.

    Labels come from ``argmax((W + E_k) x)`` where ``W`` is shared across
    tasks and ``E_k`` is a per-task perturbation of scale ``private_scale``;
    ``label_noise`` is the fraction of labels flipped to a random other
    class.
    """

    k_tasks: int
    input_dim: int
    num_classes: int = 2
    rank: int = 2
    private_scale: float = 0.0
    label_noise: float = 0.0
    samples_per_task: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.k_tasks < 1 or self.input_dim < 1 or self.samples_per_task < 1:
            raise DataError("synthetic spec: counts must be positive")
        if self.num_classes < 2:
            raise DataError("synthetic spec: need at least 2 classes")
        if not 1 <= self.rank <= self.input_dim:
            raise DataError(f"synthetic spec: rank {self.rank} outside [1, {self.input_dim}]")
        if not 0.0 <= self.label_noise < 0.5:
            raise DataError(f"synthetic spec: label noise {self.label_noise} outside [0, 0.5)")
        if self.private_scale < 0:
            raise DataError("synthetic spec: private scale must be non-negative")


def shared_label_matrix(spec: SyntheticSpec) -> np.ndarray:
    """The rank-limited labelling matrix common to every task of a spec."""
    r = np.random.default_rng([spec.seed, 0])  # stream 0 reserved for the shared matrix
    a = r.standard_normal((spec.num_classes, spec.rank))
    b = r.standard_normal((spec.rank, spec.input_dim))
    return (a @ b) / np.sqrt(spec.rank)


def gen_synthetic(spec: SyntheticSpec, task_indices: Sequence[int] | None = None) -> list[TaskDataset]:
    """Generate one dataset per task index (default ``0..k_tasks-1``).

    Task index streams are independent of each other, so held-out tasks can
    be generated later from the same spec without disturbing earlier ones.
    """
    w = shared_label_matrix(spec)
    indices = list(range(spec.k_tasks)) if task_indices is None else list(task_indices)
    datasets = []
    for t in indices:
        if t < 0:
            raise DataError(f"negative task index {t}")
        r = np.random.default_rng([spec.seed, 1 + t])
        e = spec.private_scale * r.standard_normal(w.shape)
        x = r.uniform(-1.0, 1.0, (spec.samples_per_task, spec.input_dim))
        labels = np.argmax(x @ (w + e).T, axis=1).astype(np.int64)
        flip = r.random(spec.samples_per_task) < spec.label_noise
        if flip.any():
            offsets = r.integers(1, spec.num_classes, size=int(flip.sum()))
            labels[flip] = (labels[flip] + offsets) % spec.num_classes
        datasets.append(TaskDataset(task_id=f"synth{t}", inputs=x, labels=labels, num_classes=spec.num_classes))
    return datasets


# ---------------------------------------------------------------------------
# splits and batching


def split(dataset: TaskDataset, counts: tuple[int, int, int] | None = None, seed: int = 0):
    """Seeded shuffle, then partition into (train, dev, test).

    Defaults to 1400/200/400 when the dataset is large enough, otherwise a
    proportional 70/10/20 split.
    """
    n = len(dataset)
    if counts is None:
        if n >= 2000:
            counts = (1400, 200, 400)
        else:
            tr = int(n * 0.7)
            dv = int(n * 0.1)
            counts = (tr, dv, n - tr - dv)
    tr, dv, te = counts
    if min(counts) < 1 or tr + dv + te > n:
        raise DataError(f"split counts {counts} invalid for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return (
        dataset.subset(perm[:tr], split="train"),
        dataset.subset(perm[tr : tr + dv], split="dev"),
        dataset.subset(perm[tr + dv : tr + dv + te], split="test"),
    )


def batch_iter(dataset: TaskDataset, batch_size: int = 8, seed: int = 0, epoch: int = 0) -> list[Batch]:
    """Epoch's batches after a seeded reshuffle; the final partial batch is kept."""
    if batch_size < 1:
        raise DataError("batch size must be positive")
    perm = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [dataset.take(perm[i : i + batch_size]) for i in range(0, len(dataset), batch_size)]


def draw_batch(dataset: TaskDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """One independently drawn batch (without replacement within the draw)."""
    n = len(dataset)
    size = min(batch_size, n)
    idx = rng.choice(n, size=size, replace=False)
    return dataset.take(idx)


# ---------------------------------------------------------------------------
# text corpora


UNK_TOKEN = "<unk>"


class Vocab:
    """Token <-> id mapping; id 0 is reserved for unknown tokens."""

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token = [UNK_TOKEN] + sorted(set(tokens) - {UNK_TOKEN})
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.token_to_id.get(tok, 0) for tok in tokens)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]


@dataclass(frozen=True)
class VocabPartition:
    """Split of a joint vocabulary into the tokens every task shares and the rest."""

    intersection: frozenset[str]
    complement: frozenset[str]

    @classmethod
    def from_task_vocabs(cls, task_vocabs: Sequence[set[str]]) -> "VocabPartition":
        if not task_vocabs:
            raise DataError("no task vocabularies")
        inter = frozenset(set.intersection(*[set(v) for v in task_vocabs]))
        union = frozenset(set.union(*[set(v) for v in task_vocabs]))
        return cls(intersection=inter, complement=union - inter)


def tokenize(text: str) -> list[str]:
    """Whitespace split after lowercasing; no further normalisation."""
    return text.lower().split()


def read_tsv(path) -> list[tuple[int, list[str]]]:
    """Parse ``label<TAB>text`` lines; labels must be 0 or 1."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or parts[0] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: expected 'label<TAB>text' with label 0 or 1")
            tokens = tokenize(parts[1])
            if not tokens:
                raise DataError(f"{path}:{lineno}: no tokens in text")
            rows.append((int(parts[0]), tokens))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows


def task_token_set(rows: Sequence[tuple[int, list[str]]], min_count: int = 1) -> set[str]:
    counts: dict[str, int] = {}
    for _, tokens in rows:
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    return {tok for tok, c in counts.items() if c >= min_count}


def load_tsv(path, vocab: Vocab, task_id: str) -> TaskDataset:
    """Encode a sentiment TSV against a (usually joint) vocabulary."""
    rows = read_tsv(path)
    return TaskDataset(
        task_id=task_id,
        inputs=[vocab.encode(tokens) for _, tokens in rows],
        labels=np.array([label for label, _ in rows], dtype=np.int64),
        num_classes=2,
    )


# ---------------------------------------------------------------------------
# manifests


def save_npz_task(dataset: TaskDataset, path) -> None:
    if dataset.is_text:
        raise DataError("npz task files hold vector inputs only")
    np.savez(path, inputs=dataset.inputs, labels=dataset.labels, num_classes=dataset.num_classes)


def load_npz_task(path, task_id: str) -> TaskDataset:
    with np.load(path) as data:
        return TaskDataset(
            task_id=task_id,
            inputs=data["inputs"],
            labels=data["labels"],
            num_classes=int(data["num_classes"]),
        )


def write_manifest(path, entries: Sequence[Mapping]) -> None:
    """`entries`: dicts with task_id, path, format (tsv|npz), num_classes, count."""
    payload = {"format_version": 1, "tasks": list(entries)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, min_count: int = 1) -> tuple[dict[str, TaskDataset], Vocab | None, VocabPartition | None]:
    """Load every task named in a manifest.

    Text tasks get a joint vocabulary built from all of them plus the
    per-task partition used by the shared-neuron report; vector tasks load
    directly.  Mixing the two kinds in one manifest is rejected.
    """
    base = Path(path).parent
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    tasks = payload.get("tasks")
    if not isinstance(tasks, list) or not tasks:
        raise DataError(f"{path}: manifest lists no tasks")
    formats = {entry.get("format", "tsv") for entry in tasks}
    if len(formats) > 1:
        raise DataError(f"{path}: manifest mixes task formats {sorted(formats)}")

    if formats == {"npz"}:
        out = {}
        for entry in tasks:
            out[entry["task_id"]] = load_npz_task(base / entry["path"], entry["task_id"])
        return out, None, None

    rows_per_task = {entry["task_id"]: read_tsv(base / entry["path"]) for entry in tasks}
    token_sets = {tid: task_token_set(rows, min_count) for tid, rows in rows_per_task.items()}
    vocab = Vocab(tok for toks in token_sets.values() for tok in toks)
    partition = VocabPartition.from_task_vocabs(list(token_sets.values()))
    out = {}
    for tid, rows in rows_per_task.items():
        out[tid] = TaskDataset(
            task_id=tid,
            inputs=[vocab.encode(tokens) for _, tokens in rows],
            labels=np.array([label for label, _ in rows], dtype=np.int64),
            num_classes=2,
        )
    return out, vocab, partition
