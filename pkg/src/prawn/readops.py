"""Read operations: turn readable parameters plus a batch into predictions.

Three wirings are supported.  Flat uses only the shared encoder; star adds
a private per-task encoder whose features are concatenated with the shared
ones; structural additionally mixes in a stop-gradient summary of the other
tasks' private encoders, read through their read-only exports.

Every parameter access goes through one resolver, which checks the acting
task's readable view, applies fast-weight overrides, and detaches anything
that is readable but not writable, so permissions hold at the gradient
level and not just for values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .registry import ParamMode, ParamRegistry, PermissionDenied, RegistryError
from .tensor import Tensor


class ReadOpError(ValueError):
    """Invalid read-op invocation (bad override keys, missing encoder, ...)."""


class ReadOpKind(enum.Enum):
    FLAT = "flat"
    STAR = "star"
    STRUCTURAL = "structural"


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of one encoder.

    ``widths`` are full layer dims, input first.  For ``bow-mean`` the
    input is the mean of trainable word embeddings and ``widths[0]`` must
    equal ``embed_dim``.
    """

    kind: str  # "mlp" | "bow-mean"
    widths: tuple[int, ...]
    activation: str = "tanh"
    embed_dim: int | None = None
    vocab_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("mlp", "bow-mean"):
            raise ReadOpError(f"unknown encoder kind {self.kind!r}")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ReadOpError(f"encoder widths {self.widths} must be >= 2 positive dims")
        if self.activation not in _ACTIVATIONS:
            raise ReadOpError(f"unknown activation {self.activation!r}")
        if self.kind == "bow-mean":
            if not self.embed_dim or not self.vocab_size:
                raise ReadOpError("bow-mean encoder needs embed_dim and vocab_size")
            if self.widths[0] != self.embed_dim:
                raise ReadOpError(f"bow-mean widths[0]={self.widths[0]} must equal embed_dim={self.embed_dim}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass
class ReadResult:
    """Logits plus the feature blocks the wiring produced."""

    logits: Tensor
    shared_features: Tensor
    private_features: Tensor | None = None
    peer_summary: Tensor | None = None


def _uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, shape)


class _Resolver:
    """Single gate for parameter access during one read call."""

    def __init__(self, registry, task_id, override, private_detached, access_log):
        self.view = registry.readable_view(task_id)
        self.task_id = task_id
        self.override = override or {}
        self.private_detached = private_detached
        self.access_log = access_log

    def fetch(self, param_id: str) -> Tensor:
        pt = self.view.get(param_id)
        if pt is None:
            raise PermissionDenied(f"task {self.task_id!r} may not read parameter {param_id!r}")
        if self.access_log is not None:
            self.access_log.append(param_id)
        if param_id in self.override:
            return self.override[param_id]
        if pt.mode is ParamMode.PR:
            return pt.tensor.detach()  # readable, never trainable from here
        if self.private_detached and pt.owner == self.task_id:
            return pt.tensor.detach()
        return pt.tensor


class MultiTaskModel:
    """Registered encoders and heads for a set of tasks, with one of the
    three read wirings.

    Construction registers all parameters; the registry is frozen
    afterwards.  ``read`` never mutates stored values; fast-weight overrides
    substitute shared tensors for the duration of one call.
    """

    def __init__(
        self,
        registry: ParamRegistry,
        kind: ReadOpKind,
        task_classes: Mapping[str, int],
        shared_spec: EncoderSpec,
        private_spec: EncoderSpec | None = None,
        *,
        discriminator: bool = False,
        init_seed: int = 0,
    ):
        if not task_classes:
            raise ReadOpError("model needs at least one task")
        if kind in (ReadOpKind.STAR, ReadOpKind.STRUCTURAL) and private_spec is None:
            raise ReadOpError(f"{kind.value} read-op needs a private encoder spec")
        if kind is ReadOpKind.STRUCTURAL and len(task_classes) < 2:
            raise ReadOpError("structural read-op needs at least 2 tasks")

        self.registry = registry
        self.kind = kind
        self.shared_spec = shared_spec
        self.private_spec = private_spec if kind is not ReadOpKind.FLAT else None
        self.task_ids = sorted(task_classes)
        self.task_classes = dict(task_classes)
        self.has_discriminator = discriminator

        rng = np.random.default_rng([init_seed, 0])
        for tid in self.task_ids:
            registry.register_task(tid)
        self.shared_ids = self._register_encoder(rng, "shared.enc", shared_spec, ParamMode.SWR, "shared")
        self.private_ids: dict[str, list[str]] = {}
        self.head_ids: dict[str, list[str]] = {}
        for tid in self.task_ids:
            agent = registry.task(tid)
            if self.private_spec is not None:
                pids = self._register_encoder(rng, f"task.{tid}.enc", self.private_spec, ParamMode.PWR, tid)
                self.private_ids[tid] = pids
                agent.private_param_ids.extend(pids)
                if kind is ReadOpKind.STRUCTURAL:
                    for pid in pids:
                        registry.expose_readable(pid)
            head_in = self._head_input_dim()
            hw = registry.register(f"task.{tid}.head.W", _uniform_init(rng, (head_in, task_classes[tid])), ParamMode.PWR, tid)
            hb = registry.register(f"task.{tid}.head.b", _uniform_init(rng, task_classes[tid]), ParamMode.PWR, tid)
            self.head_ids[tid] = [hw.id, hb.id]
            agent.head_param_ids.extend([hw.id, hb.id])
            agent.private_param_ids.extend([hw.id, hb.id])
        if discriminator:
            k = len(self.task_ids)
            if k < 2:
                raise ReadOpError("task discriminator needs at least 2 tasks")
            d = shared_spec.feature_dim
            registry.register("shared.disc.W", _uniform_init(rng, (d, k)), ParamMode.SWR, "shared")
            registry.register("shared.disc.b", _uniform_init(rng, k), ParamMode.SWR, "shared")
            self.discriminator_ids = ["shared.disc.W", "shared.disc.b"]
        else:
            self.discriminator_ids = []
        registry.freeze()

    # -- registration helpers -------------------------------------------

    def _register_encoder(self, rng, prefix, spec, mode, owner) -> list[str]:
        ids = []
        if spec.kind == "bow-mean":
            pt = self.registry.register(f"{prefix}.embed", _uniform_init(rng, (spec.vocab_size, spec.embed_dim)), mode, owner)
            ids.append(pt.id)
        for i in range(len(spec.widths) - 1):
            w = self.registry.register(f"{prefix}.L{i}.W", _uniform_init(rng, (spec.widths[i], spec.widths[i + 1])), mode, owner)
            b = self.registry.register(f"{prefix}.L{i}.b", _uniform_init(rng, spec.widths[i + 1]), mode, owner)
            ids.extend([w.id, b.id])
        return ids

    def _head_input_dim(self) -> int:
        d = self.shared_spec.feature_dim
        if self.kind is ReadOpKind.FLAT:
            return d
        dp = self.private_spec.feature_dim
        if self.kind is ReadOpKind.STAR:
            return d + dp
        return d + 2 * dp  # structural: own private + peer summary

    def add_task(self, task_id: str, num_classes: int, init_seed: int) -> None:
        """Register a fresh private parameter set for an unseen task.

        This is the one sanctioned post-freeze registration path; it is how
        a trained shared space is combined with new task parameters.
        """
        if task_id in self.task_classes:
            raise ReadOpError(f"task {task_id!r} already present")
        rng = np.random.default_rng([init_seed, 1])
        self.registry.unfreeze()
        try:
            self.registry.register_task(task_id)
            agent = self.registry.task(task_id)
            if self.private_spec is not None:
                pids = self._register_encoder(rng, f"task.{task_id}.enc", self.private_spec, ParamMode.PWR, task_id)
                self.private_ids[task_id] = pids
                agent.private_param_ids.extend(pids)
                if self.kind is ReadOpKind.STRUCTURAL:
                    for pid in pids:
                        self.registry.expose_readable(pid)
            head_in = self._head_input_dim()
            hw = self.registry.register(f"task.{task_id}.head.W", _uniform_init(rng, (head_in, num_classes)), ParamMode.PWR, task_id)
            hb = self.registry.register(f"task.{task_id}.head.b", _uniform_init(rng, num_classes), ParamMode.PWR, task_id)
            self.head_ids[task_id] = [hw.id, hb.id]
            agent.head_param_ids.extend([hw.id, hb.id])
            agent.private_param_ids.extend([hw.id, hb.id])
        finally:
            self.registry.freeze()
        self.task_classes[task_id] = num_classes
        self.task_ids = sorted(self.task_classes)

    # -- forward ----------------------------------------------------------

    def shared_map(self) -> dict[str, Tensor]:
        return self.registry.shared_map()

    def private_map(self, task_id: str) -> dict[str, Tensor]:
        ids = list(self.private_ids.get(task_id, [])) + self.head_ids[task_id]
        return self.registry.tensor_map(dict.fromkeys(ids))

    def shared_encode(self, inputs) -> Tensor:
        """Shared-encoder features only; a read-only analysis path."""
        x = self._wrap_inputs(inputs)
        return self._encode(self.shared_spec, "shared.enc", x, lambda pid: self.registry.get(pid).tensor)

    def _wrap_inputs(self, inputs):
        if isinstance(inputs, Tensor):
            return inputs
        if isinstance(inputs, np.ndarray):
            return Tensor(inputs)
        return inputs  # token-id sequences pass through

    def _encode(self, spec: EncoderSpec, prefix: str, inputs, fetch) -> Tensor:
        act = _ACTIVATIONS[spec.activation]
        if spec.kind == "bow-mean":
            h = T.embed_lookup_mean(fetch(f"{prefix}.embed"), inputs)
        else:
            h = inputs
        for i in range(len(spec.widths) - 1):
            h = act(T.add(T.matmul(h, fetch(f"{prefix}.L{i}.W")), fetch(f"{prefix}.L{i}.b")))
        return h

    def _validate_override(self, override) -> None:
        if not override:
            return
        shared = set(self.registry.shared_map())
        unknown = sorted(set(override) - shared)
        if unknown:
            raise ReadOpError(f"override keys not matching shared param ids: {unknown}")

    def read(
        self,
        task_id: str,
        inputs,
        override: Mapping[str, Tensor] | None = None,
        *,
        private_detached: bool = False,
        access_log: list[str] | None = None,
    ) -> ReadResult:
        """Evaluate the task's read-op on a batch.

        ``override`` substitutes shared parameters (fast weights) for this
        call only.  ``private_detached`` evaluates the task's own private
        parameters as constants, which keeps them out of any gradient later
        taken through this result.
        """
        self._validate_override(override)
        resolver = _Resolver(self.registry, task_id, override, private_detached, access_log)
        x = self._wrap_inputs(inputs)

        shared = self._encode(self.shared_spec, "shared.enc", x, resolver.fetch)
        private = None
        summary = None
        blocks = [shared]
        if self.kind is not ReadOpKind.FLAT:
            private = self._encode(self.private_spec, f"task.{task_id}.enc", x, resolver.fetch)
            blocks.append(private)
        if self.kind is ReadOpKind.STRUCTURAL:
            others = [tid for tid in self.task_ids if tid != task_id]
            if not others:
                raise ReadOpError("structural read-op needs at least 2 tasks")
            peer_feats = [
                self._encode(self.private_spec, f"task.{tid}.enc", x, lambda pid: resolver.fetch(f"{pid}@pr"))
                for tid in others
            ]
            summary = peer_feats[0]
            for f in peer_feats[1:]:
                summary = T.add(summary, f)
            summary = T.smul(summary, 1.0 / len(peer_feats))
            blocks.append(summary)

        feats = blocks[0] if len(blocks) == 1 else T.concat_cols(blocks)
        logits = T.add(T.matmul(feats, resolver.fetch(f"task.{task_id}.head.W")), resolver.fetch(f"task.{task_id}.head.b"))
        return ReadResult(logits=logits, shared_features=shared, private_features=private, peer_summary=summary)
