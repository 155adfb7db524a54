"""Parameter store with per-task read/write permissions.

Every parameter carries one of four permission modes.  A task sees shared
parameters, its own private writable parameters, and read-only exports of
other tasks; it may write shared parameters and its own private ones, and
nothing else.  ``apply_update`` is the single mutation gate and enforces
this before any optimizer rule runs.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .tensor import Tensor

SHARED_OWNER = "shared"

_MAGIC = b"PRAWNCK1"
_FORMAT_VERSION = 1


class RegistryError(ValueError):
    """Invalid registration or lookup."""


class PermissionDenied(RegistryError):
    """A task attempted an operation its permissions do not allow."""


class UnknownTaskError(RegistryError):
    """Task id was never registered."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint data."""


class ParamMode(enum.Enum):
    """The four effective permission modes of a parameter."""

    SWR = "swr"  # sharable, writable, readable
    PWR = "pwr"  # private, writable, readable (owner only)
    PR = "pr"  # private, read-only export
    NONE = "none"  # private, neither readable nor writable

    @property
    def sharable(self) -> bool:
        return self is ParamMode.SWR

    @property
    def writable(self) -> bool:
        return self in (ParamMode.SWR, ParamMode.PWR)

    @property
    def readable(self) -> bool:
        return self is not ParamMode.NONE

    @classmethod
    def from_flags(cls, sharable: bool, writable: bool, readable: bool) -> "ParamMode":
        """Map a permission triple to a mode; combinations outside the four
        effective ones are rejected."""
        table = {
            (True, True, True): cls.SWR,
            (False, True, True): cls.PWR,
            (False, False, True): cls.PR,
            (False, False, False): cls.NONE,
        }
        key = (bool(sharable), bool(writable), bool(readable))
        if key not in table:
            raise RegistryError(f"no effective mode for sharable={key[0]}, writable={key[1]}, readable={key[2]}")
        return table[key]


@dataclass
class ParamTensor:
    """A tensor plus the permission metadata governing access to it."""

    id: str
    tensor: Tensor
    mode: ParamMode
    owner: str
    alias_of: str | None = None


@dataclass
class TaskAgent:
    """A task's identity and its registered parameter views."""

    task_id: str
    dataset: object | None = None
    head_param_ids: list[str] = field(default_factory=list)
    private_param_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class ParamRecord:
    """One parameter as stored in a checkpoint."""

    id: str
    mode: ParamMode
    owner: str
    values: np.ndarray


class ParamRegistry:
    """Single-writer parameter store; see module docstring for semantics."""

    def __init__(self) -> None:
        self._params: dict[str, ParamTensor] = {}
        self._tasks: dict[str, TaskAgent] = {}
        self._frozen = False

    # -- tasks ---------------------------------------------------------

    def register_task(self, task_id: str, dataset: object | None = None) -> TaskAgent:
        if task_id in self._tasks:
            raise RegistryError(f"task {task_id!r} already registered")
        if task_id == SHARED_OWNER:
            raise RegistryError(f"{SHARED_OWNER!r} is reserved and cannot be a task id")
        agent = TaskAgent(task_id=task_id, dataset=dataset)
        self._tasks[task_id] = agent
        return agent

    def task(self, task_id: str) -> TaskAgent:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise UnknownTaskError(f"unknown task {task_id!r}") from None

    @property
    def task_ids(self) -> list[str]:
        return list(self._tasks)

    # -- registration ----------------------------------------------------

    def freeze(self) -> None:
        self._frozen = True

    def unfreeze(self) -> None:
        self._frozen = False

    def register(self, param_id: str, values, mode: ParamMode, owner: str) -> ParamTensor:
        if self._frozen:
            raise RegistryError(f"registry is frozen; cannot register {param_id!r}")
        if param_id in self._params:
            raise RegistryError(f"duplicate parameter id {param_id!r}")
        if mode is ParamMode.SWR and owner != SHARED_OWNER:
            raise RegistryError(f"{param_id!r}: sharable parameters must be owned by {SHARED_OWNER!r}, got {owner!r}")
        if mode is not ParamMode.SWR:
            if owner == SHARED_OWNER:
                raise RegistryError(f"{param_id!r}: non-sharable parameters need a task owner")
            if owner not in self._tasks:
                raise UnknownTaskError(f"{param_id!r}: owner task {owner!r} not registered")
        tensor = values if isinstance(values, Tensor) else Tensor(values)
        tensor.requires_grad = True
        pt = ParamTensor(id=param_id, tensor=tensor, mode=mode, owner=owner)
        self._params[param_id] = pt
        return pt

    def expose_readable(self, param_id: str) -> ParamTensor:
        """Create a read-only export of a private parameter for other tasks.

        The alias shares storage with its source, so it tracks the owner's
        updates without copying; it is never writable.
        """
        src = self.get(param_id)
        if src.alias_of is not None:
            raise RegistryError(f"{param_id!r} is itself an alias")
        if src.mode is ParamMode.NONE:
            raise RegistryError(f"{param_id!r}: non-readable parameters cannot declare readers")
        if src.mode is ParamMode.SWR:
            raise RegistryError(f"{param_id!r} is shared and already readable by every task")
        alias_id = f"{param_id}@pr"
        if alias_id in self._params:
            raise RegistryError(f"duplicate parameter id {alias_id!r}")
        alias = ParamTensor(id=alias_id, tensor=src.tensor, mode=ParamMode.PR, owner=src.owner, alias_of=param_id)
        self._params[alias_id] = alias
        return alias

    # -- lookup ----------------------------------------------------------

    def get(self, param_id: str) -> ParamTensor:
        try:
            return self._params[param_id]
        except KeyError:
            raise RegistryError(f"unknown parameter {param_id!r}") from None

    def params(self, mode: ParamMode | None = None, include_aliases: bool = True) -> Iterator[ParamTensor]:
        for pt in self._params.values():
            if not include_aliases and pt.alias_of is not None:
                continue
            if mode is None or pt.mode is mode:
                yield pt

    def shared_map(self) -> dict[str, Tensor]:
        """id -> tensor for every shared parameter."""
        return {pt.id: pt.tensor for pt in self.params(ParamMode.SWR)}

    def tensor_map(self, param_ids) -> dict[str, Tensor]:
        return {pid: self.get(pid).tensor for pid in param_ids}

    # -- permission views --------------------------------------------------

    def readable_view(self, task_id: str) -> dict[str, ParamTensor]:
        """Shared params, the task's own writable privates, and other tasks'
        read-only exports."""
        self.task(task_id)
        out: dict[str, ParamTensor] = {}
        for pid, pt in self._params.items():
            if pt.mode is ParamMode.SWR:
                out[pid] = pt
            elif pt.mode is ParamMode.PWR and pt.owner == task_id:
                out[pid] = pt
            elif pt.mode is ParamMode.PR and pt.owner != task_id:
                out[pid] = pt
        return out

    def writable_view(self, task_id: str) -> dict[str, ParamTensor]:
        """Shared params plus the task's own writable privates."""
        self.task(task_id)
        return {
            pid: pt
            for pid, pt in self._params.items()
            if pt.mode is ParamMode.SWR or (pt.mode is ParamMode.PWR and pt.owner == task_id)
        }

    def is_readable(self, task_id: str, param_id: str) -> bool:
        return param_id in self.readable_view(task_id)

    def is_writable(self, task_id: str, param_id: str) -> bool:
        return param_id in self.writable_view(task_id)

    # -- mutation ----------------------------------------------------------

    def apply_update(self, task_id: str, grads: Mapping[str, object], step_rule: Callable[[ParamTensor, np.ndarray], None]) -> None:
        """Apply ``step_rule(param, grad)`` for every entry, after checking
        the acting task may write every named parameter."""
        writable = self.writable_view(task_id)
        for pid in grads:
            if pid not in self._params:
                raise RegistryError(f"unknown parameter {pid!r}")
            if pid not in writable:
                pt = self._params[pid]
                raise PermissionDenied(
                    f"task {task_id!r} may not write parameter {pid!r} (mode {pt.mode.value}, owner {pt.owner!r})"
                )
        for pid, grad in grads.items():
            pt = self._params[pid]
            arr = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
            if arr.shape != pt.tensor.shape:
                raise RegistryError(f"gradient shape {arr.shape} != parameter {pid!r} shape {pt.tensor.shape}")
            step_rule(pt, arr)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of all parameter values (aliases excluded: they share
        their source's storage)."""
        return {pt.id: pt.tensor.data.copy() for pt in self.params(include_aliases=False)}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        ids = [pt.id for pt in self.params(include_aliases=False)]
        if set(snap) != set(ids):
            raise RegistryError("snapshot does not match registered parameters")
        for pid in ids:
            self._params[pid].tensor.assign(snap[pid])


# ---------------------------------------------------------------------------
# checkpoint format: magic, format-version and count header, then per
# parameter: id, mode, owner, shape, raw little-endian float64 values.


def _write_str(buf: io.BufferedIOBase, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf: io.BufferedIOBase) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def save_checkpoint(registry: ParamRegistry, path) -> None:
    records = [pt for pt in registry.params(include_aliases=False)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(records)))
        for pt in records:
            _write_str(fh, pt.id)
            _write_str(fh, pt.mode.value)
            _write_str(fh, pt.owner)
            shape = pt.tensor.shape
            fh.write(struct.pack("<I", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(pt.tensor.data.astype("<f8", copy=False).tobytes(order="C"))


def read_checkpoint(path) -> list[ParamRecord]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        records = []
        for _ in range(count):
            pid = _read_str(fh)
            mode = ParamMode(_read_str(fh))
            owner = _read_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated values for {pid!r}")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            records.append(ParamRecord(id=pid, mode=mode, owner=owner, values=values))
        return records


def load_checkpoint_values(registry: ParamRegistry, path, param_ids=None) -> list[str]:
    """Overwrite registered parameter values from a checkpoint.

    ``param_ids`` restricts loading to a subset (e.g. only shared params
    when adapting to a new task).  Mode, owner and shape must match the
    registered parameter exactly.  Returns the loaded ids.
    """
    wanted = set(param_ids) if param_ids is not None else None
    loaded = []
    by_id = {rec.id: rec for rec in read_checkpoint(path)}
    targets = wanted if wanted is not None else set(by_id)
    for pid in sorted(targets):
        if pid not in by_id:
            raise CheckpointError(f"checkpoint has no parameter {pid!r}")
        rec = by_id[pid]
        pt = registry.get(pid)
        if pt.mode is not rec.mode or pt.owner != rec.owner:
            raise CheckpointError(f"{pid!r}: checkpoint mode/owner {rec.mode.value}/{rec.owner!r} does not match registry")
        pt.tensor.assign(rec.values)
        loaded.append(pid)
    return loaded
