"""Post-hoc analyses: parameter-trajectory PCA and shared-neuron word stats.

PCA runs on per-epoch flattened parameter copies.  When every logged group
(the shared block and each task's private block) has the same length, all
groups are projected into one space so their paths are directly comparable;
otherwise each group is projected on its own and the output says so.

The neuron statistic asks, for each word, how often a shared-layer neuron
attains its per-sequence maximum on that word, normalised by the word's
frequency and the layer width.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..datakit import TaskDataset, Vocab, VocabPartition
from ..readops import MultiTaskModel
from ..registry import ParamMode, ParamRegistry
from ..tensor import no_grad


class AnalysisError(ValueError):
    """Analysis preconditions not met (too few epochs, non-text model, ...)."""


# ---------------------------------------------------------------------------
# trajectory log


@dataclass
class TrajectoryLog:
    """Per-epoch flattened copies of each parameter group."""

    epochs: list[int] = field(default_factory=list)
    groups: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def append(self, epoch: int, group_vectors: Mapping[str, np.ndarray]) -> None:
        if self.epochs and set(group_vectors) != set(self.groups):
            raise AnalysisError("trajectory groups changed between epochs")
        for name, vec in group_vectors.items():
            vec = np.asarray(vec, dtype=np.float64).ravel()
            bucket = self.groups.setdefault(name, [])
            if bucket and bucket[0].size != vec.size:
                raise AnalysisError(f"group {name!r} changed length between epochs")
            bucket.append(vec.copy())
        self.epochs.append(epoch)

    def save_npz(self, path) -> None:
        arrays = {"epochs": np.asarray(self.epochs, dtype=np.int64)}
        for name, vecs in self.groups.items():
            arrays[f"group:{name}"] = np.stack(vecs)
        np.savez(path, **arrays)

    @classmethod
    def load_npz(cls, path) -> "TrajectoryLog":
        log = cls()
        with np.load(path) as data:
            epochs = data["epochs"].tolist()
            groups = {key[len("group:") :]: data[key] for key in data.files if key.startswith("group:")}
        if not groups:
            raise AnalysisError(f"{path}: no trajectory groups")
        log.epochs = [int(e) for e in epochs]
        log.groups = {name: [row.copy() for row in mat] for name, mat in sorted(groups.items())}
        return log


def trajectory_groups(registry: ParamRegistry) -> dict[str, np.ndarray]:
    """Flattened current values: one 'shared' vector plus one per task."""
    buckets: dict[str, list[tuple[str, np.ndarray]]] = {}
    for pt in registry.params(include_aliases=False):
        if pt.mode is ParamMode.SWR:
            buckets.setdefault("shared", []).append((pt.id, pt.tensor.data))
        elif pt.mode is ParamMode.PWR:
            buckets.setdefault(pt.owner, []).append((pt.id, pt.tensor.data))
    return {
        name: np.concatenate([arr.ravel() for _, arr in sorted(parts)])
        for name, parts in buckets.items()
    }


# ---------------------------------------------------------------------------
# PCA via power iteration with deflation


def power_iteration_pca(
    matrix: np.ndarray,
    dims: int = 3,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> tuple[np.ndarray, np.ndarray, str | None]:
    """Top principal components of the rows of ``matrix``.

    Returns (components [k, p], variances [k], warning).  ``k`` can fall
    short of ``dims`` when the centered matrix has lower rank; the warning
    says so.  The covariance uses the 1/(n-1) convention; matvecs go
    through the data matrix, so the p x p covariance is never formed.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise AnalysisError(f"pca expects a matrix, got shape {x.shape}")
    n, p = x.shape
    centered = x - x.mean(axis=0)
    denom = max(n - 1, 1)
    total = float(np.sum(centered * centered)) / denom
    if total <= 0.0:
        return np.zeros((0, p)), np.zeros(0), "degenerate trajectory: zero variance"

    comps: list[np.ndarray] = []
    variances: list[float] = []

    def matvec(v: np.ndarray) -> np.ndarray:
        w = centered.T @ (centered @ v) / denom
        for lam, u in zip(variances, comps):
            w = w - lam * float(u @ v) * u
        return w

    rng = np.random.default_rng(0)
    warning = None
    for k in range(dims):
        v = rng.standard_normal(p)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = matvec(v)
            norm = float(np.linalg.norm(w))
            if norm <= tol * total:
                lam = 0.0
                break
            v_next = w / norm
            lam = float(v_next @ matvec(v_next))
            if min(np.linalg.norm(v_next - v), np.linalg.norm(v_next + v)) < tol:
                v = v_next
                break
            v = v_next
        if lam <= max(tol * total, 1e-15):
            warning = f"trajectory rank below {dims}; emitted {k} components"
            break
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        comps.append(v)
        variances.append(lam)
    return np.array(comps), np.array(variances), warning


@dataclass
class PcaProjection:
    """Projected trajectory rows plus the variances behind them."""

    rows: list[tuple[int, str, tuple[float, ...]]]
    variances: dict[str, list[float]]
    dims: int
    joint: bool
    warnings: list[str]


def pca_trajectory(log: TrajectoryLog, dims: int = 3, tol: float = 1e-10) -> PcaProjection:
    """Project every group's trajectory onto its top principal axes.

    Joint projection (one shared space) when all groups have equal length;
    otherwise per-group with a note.  Needs at least ``dims + 1`` epochs.
    """
    if dims < 1:
        raise AnalysisError("pca needs dims >= 1")
    if len(log.epochs) < dims + 1:
        raise AnalysisError(f"pca needs at least {dims + 1} logged epochs, got {len(log.epochs)}")
    names = sorted(log.groups)
    warnings: list[str] = []
    lengths = {log.groups[name][0].size for name in names}
    joint = len(lengths) == 1

    def pad(coords: np.ndarray) -> list[tuple[float, ...]]:
        out = np.zeros((coords.shape[0], dims))
        out[:, : coords.shape[1]] = coords
        return [tuple(row) for row in out]

    rows: list[tuple[int, str, tuple[float, ...]]] = []
    variances: dict[str, list[float]] = {}
    if joint:
        stacked = np.vstack([np.stack(log.groups[name]) for name in names])
        comps, var, warning = power_iteration_pca(stacked, dims, tol)
        if warning:
            warnings.append(warning)
        center = stacked.mean(axis=0)
        for name in names:
            coords = (np.stack(log.groups[name]) - center) @ comps.T if comps.size else np.zeros((len(log.epochs), 0))
            for epoch, c in zip(log.epochs, pad(coords)):
                rows.append((epoch, name, c))
        variances["joint"] = [float(v) for v in var]
    else:
        warnings.append("groups have unequal parameter counts; projected per group")
        for name in names:
            mat = np.stack(log.groups[name])
            comps, var, warning = power_iteration_pca(mat, dims, tol)
            if warning:
                warnings.append(f"{name}: {warning}")
            center = mat.mean(axis=0)
            coords = (mat - center) @ comps.T if comps.size else np.zeros((len(log.epochs), 0))
            for epoch, c in zip(log.epochs, pad(coords)):
                rows.append((epoch, name, c))
            variances[name] = [float(v) for v in var]
    rows.sort(key=lambda r: (r[0], r[1]))
    return PcaProjection(rows=rows, variances=variances, dims=dims, joint=joint, warnings=warnings)


def write_pca_csv(result: PcaProjection, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for warning in result.warnings:
            fh.write(f"# warning: {warning}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "group", *[f"c{i + 1}" for i in range(result.dims)]])
        for epoch, group, coords in result.rows:
            writer.writerow([epoch, group, *[f"{c:.6f}" for c in coords]])


# ---------------------------------------------------------------------------
# shared-neuron word statistic


@dataclass(frozen=True)
class WordStat:
    word: str
    part: str  # "intersection" | "complement"
    occurrences: int
    peak_count: int
    score: float


@dataclass
class NeuronStats:
    rows: list[WordStat]
    layer_width: int
    n_sequences: int
    total_increments: int

    def top(self, part: str, k: int = 10) -> list[WordStat]:
        ranked = [r for r in self.rows if r.part == part]
        ranked.sort(key=lambda r: (-r.score, r.word))
        return ranked[:k]


def neuron_feature_stat(
    model: MultiTaskModel,
    test_sets: Sequence[TaskDataset],
    vocab: Vocab,
    partition: VocabPartition,
) -> NeuronStats:
    """Count, per word, how many (sequence, neuron) pairs peak on it.

    Each word's activation is its single-token path through the shared
    encoder; per sequence and neuron the earliest position with the maximal
    activation wins.  Scores are peak counts over occurrences times layer
    width, so summed peak counts equal layer width times sequence count.
    """
    if model.shared_spec.kind != "bow-mean":
        raise AnalysisError("neuron statistics need a text model with a shared embedding encoder")
    if any(not ds.is_text for ds in test_sets):
        raise AnalysisError("neuron statistics need token-sequence test sets")
    width = model.shared_spec.feature_dim
    occurrences: Counter[int] = Counter()
    peaks: Counter[int] = Counter()
    n_sequences = 0
    with no_grad():
        for ds in test_sets:
            for seq in ds.inputs:
                n_sequences += 1
                occurrences.update(seq)
                acts = model.shared_encode([(tok,) for tok in seq])  # [len, width]
                winners = np.argmax(acts.data, axis=0)  # ties: lowest position
                for neuron in range(width):
                    peaks[seq[int(winners[neuron])]] += 1
    rows = []
    for tok_id in sorted(occurrences):
        word = vocab.token(tok_id)
        part = "intersection" if word in partition.intersection else "complement"
        n_w = occurrences[tok_id]
        n_max = peaks.get(tok_id, 0)
        rows.append(WordStat(word=word, part=part, occurrences=n_w, peak_count=n_max, score=n_max / (n_w * width)))
    return NeuronStats(
        rows=rows,
        layer_width=width,
        n_sequences=n_sequences,
        total_increments=int(sum(peaks.values())),
    )


def write_neuron_csv(stats: NeuronStats, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["word", "part", "occurrences", "peak_count", "score"])
        for row in sorted(stats.rows, key=lambda r: (-r.score, r.word)):
            writer.writerow([row.word, row.part, row.occurrences, row.peak_count, f"{row.score:.6f}"])
