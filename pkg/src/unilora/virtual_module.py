"""Virtual model instances over one shared, immutable base.

A :class:`VirtualModel` is a handle to the library's :class:`BaseWeights`
plus its own adapter overlays and trainer states.  Nothing here copies base
arrays, so any number of instances costs one base in resident memory.

Voiding packs an instance's adapters and trainer states into a
:class:`VoidedAdapterBundle` (the weight container format, no base tensors)
that can be written to a file and unvoided into an instance of another
runtime sharing a compatible base.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import container
from .mixed_lora import AdapterError, LoraAdapter, bake_static_scaling
from .model import BaseWeights, ModelConfig, forward_full
from .training import FINISHED, MIGRATING, PAUSED, RUNNING, TrainerState

INFERENCE, TRAINING = "inference", "training"


class NotQuiescentError(RuntimeError):
    pass


class BundleMismatchError(ValueError):
    pass


@dataclass
class VirtualModel:
    instance_id: str
    base: BaseWeights
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    trainers: dict[str, TrainerState] = field(default_factory=dict)
    overrides: dict[str, Any] = field(default_factory=dict)
    in_flight: Counter = field(default_factory=Counter)
    _library: "ModelLibrary | None" = field(default=None, repr=False)

    @property
    def mode(self) -> str:
        return TRAINING if any(s.status != FINISHED for s in self.trainers.values()) else INFERENCE

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def attach_adapter(self, adapter: LoraAdapter, bake: bool = False) -> LoraAdapter:
        """Bind ``adapter`` (by reference; ``bake=True`` binds a baked copy).

        Adapter ids are unique across the whole library so requests can name
        an adapter without naming its instance.
        """
        adapter.check_compatible(self.base.config)
        owner = self._library.owner_of(adapter.adapter_id) if self._library else None
        if adapter.adapter_id in self.adapters or owner is not None:
            raise AdapterError(f"adapter {adapter.adapter_id!r} is already bound")
        if bake:
            adapter = bake_static_scaling(adapter)
        self.adapters[adapter.adapter_id] = adapter
        return adapter

    def detach_adapter(self, adapter_id: str) -> LoraAdapter:
        if adapter_id not in self.adapters:
            raise AdapterError(f"unknown adapter {adapter_id!r}")
        if self.in_flight[adapter_id]:
            raise NotQuiescentError(f"adapter {adapter_id!r} has {self.in_flight[adapter_id]} requests in flight")
        for st in self.trainers.values():
            if st.adapter_id == adapter_id and st.status == RUNNING:
                raise NotQuiescentError(f"trainer {st.job_id} is still running on {adapter_id!r}")
        self.trainers = {k: s for k, s in self.trainers.items() if s.adapter_id != adapter_id}
        return self.adapters.pop(adapter_id)

    def add_trainer(self, state: TrainerState) -> TrainerState:
        if state.adapter_id not in self.adapters:
            raise AdapterError(f"trainer {state.job_id}: adapter {state.adapter_id!r} not bound here")
        if self.adapters[state.adapter_id].baked:
            raise AdapterError("cannot train a baked adapter")
        if self._library and self._library.trainer(state.job_id) is not None:
            raise ValueError(f"duplicate trainer id {state.job_id!r}")
        for st in self.trainers.values():
            if st.adapter_id == state.adapter_id and st.status != FINISHED:
                raise ValueError(f"adapter {state.adapter_id!r} already has trainer {st.job_id}")
        self.trainers[state.job_id] = state
        return state

    @property
    def quiescent(self) -> bool:
        return sum(self.in_flight.values()) == 0 and all(s.status != RUNNING for s in self.trainers.values())

    def forward(self, tokens, adapter_id: str | None = None, dynamic_scale: float = 1.0) -> np.ndarray:
        """Single-sequence logits through this instance."""
        adapter = None
        if adapter_id is not None:
            if adapter_id not in self.adapters:
                raise AdapterError(f"unknown adapter {adapter_id!r}")
            adapter = self.adapters[adapter_id]
        return forward_full(self.base, tokens, adapter, dynamic_scale)

    def adapter_arrays(self):
        for ad in self.adapters.values():
            yield from ad.weights.values()

    @property
    def adapter_bytes(self) -> int:
        return sum(a.nbytes for a in self.adapters.values())


class ModelLibrary:
    """Registry of virtual models sharing one base handle."""

    def __init__(self, base: BaseWeights):
        self.base = base
        self.models: dict[str, VirtualModel] = {}

    def create_virtual_model(self, instance_id: str, **overrides) -> VirtualModel:
        if instance_id in self.models:
            raise ValueError(f"duplicate virtual model id {instance_id!r}")
        vm = VirtualModel(instance_id, self.base, overrides=dict(overrides), _library=self)
        self.models[instance_id] = vm
        return vm

    def destroy_virtual_model(self, instance_id: str) -> None:
        vm = self.get(instance_id)
        if not vm.quiescent:
            raise NotQuiescentError(f"{instance_id} is not quiescent")
        del self.models[instance_id]

    def get(self, instance_id: str) -> VirtualModel:
        if instance_id not in self.models:
            raise KeyError(f"unknown virtual model {instance_id!r}")
        return self.models[instance_id]

    def owner_of(self, adapter_id: str) -> VirtualModel | None:
        for vm in self.models.values():
            if adapter_id in vm.adapters:
                return vm
        return None

    def adapter(self, adapter_id: str) -> LoraAdapter:
        vm = self.owner_of(adapter_id)
        if vm is None:
            raise AdapterError(f"adapter {adapter_id!r} is not bound")
        return vm.adapters[adapter_id]

    def adapters(self) -> dict[str, LoraAdapter]:
        out = {}
        for vm in self.models.values():
            out.update(vm.adapters)
        return out

    def trainer(self, job_id: str) -> TrainerState | None:
        for vm in self.models.values():
            if job_id in vm.trainers:
                return vm.trainers[job_id]
        return None

    def trainers(self) -> list[TrainerState]:
        return [s for vm in self.models.values() for s in vm.trainers.values()]

    def resident_bytes(self) -> int:
        """Bytes held by base and adapter arrays, each buffer counted once."""
        seen: dict[int, int] = {}

        def add(arr):
            root = arr
            while isinstance(root.base, np.ndarray):
                root = root.base
            seen[id(root)] = root.nbytes

        for _, arr in self.base.items():
            add(arr)
        for vm in self.models.values():
            assert vm.base is self.base
            for a, b in vm.adapter_arrays():
                add(a)
                add(b)
        return sum(seen.values())


@dataclass
class VoidedAdapterBundle:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any]

    def to_bytes(self) -> bytes:
        return container.dumps(self.tensors, self.meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VoidedAdapterBundle":
        tensors, meta = container.loads(data)
        if meta.get("kind") != "bundle":
            raise container.ContainerError("not a voided adapter bundle")
        return cls(tensors, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "VoidedAdapterBundle":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())


def void_model(vm: VirtualModel) -> VoidedAdapterBundle:
    """Detach everything from a quiescent instance into a bundle.

    Trainers must be paused (or finished); accumulation buffers, optimizer
    moments and the RNG cursor travel with them.  The instance is left empty.
    """
    if not vm.quiescent:
        raise NotQuiescentError(f"{vm.instance_id} is not quiescent")
    tensors: dict[str, np.ndarray] = {}
    for aid, ad in vm.adapters.items():
        for key, (a, b) in ad.weights.items():
            tensors[f"adapter/{aid}/{key}.A"] = a
            tensors[f"adapter/{aid}/{key}.B"] = b
    records = []
    for job, st in vm.trainers.items():
        for name, arr in st.tensors().items():
            tensors[f"trainer/{job}/{name}"] = arr
        rec = st.record()
        rec["status"] = MIGRATING if st.status == PAUSED else st.status
        records.append(rec)
    cfg = vm.config.to_dict()
    meta = {
        "kind": "bundle",
        "instance_id": vm.instance_id,
        "overrides": vm.overrides,
        "base": {k: cfg[k] for k in ("vocab_size", "hidden", "n_layers", "mlp_hidden", "dtype")},
        "adapters": [ad.metadata() for ad in vm.adapters.values()],
        "trainers": records,
    }
    bundle = VoidedAdapterBundle(tensors, meta)
    vm.adapters.clear()
    vm.trainers.clear()
    return bundle


def unvoid_into(bundle: VoidedAdapterBundle, vm: VirtualModel) -> VirtualModel:
    """Rebind a bundle's adapters and trainers onto ``vm``.

    Trainers come back ``paused``; resume them to continue.
    """
    cfg = vm.config.to_dict()
    for k, v in bundle.meta["base"].items():
        if cfg[k] != v:
            raise BundleMismatchError(f"bundle base {k}={v} but target has {cfg[k]}")
    dtype = vm.config.np_dtype
    adapters = []
    for md in bundle.meta["adapters"]:
        aid = md["adapter_id"]
        weights = {}
        for key in md["keys"]:
            a = bundle.tensors[f"adapter/{aid}/{key}.A"].astype(dtype, copy=True)
            b = bundle.tensors[f"adapter/{aid}/{key}.B"].astype(dtype, copy=True)
            weights[key] = (a, b)
        ad = LoraAdapter(aid, md["rank"], md["alpha"], weights, md["baked"], md["dynamic_scale"])
        try:
            ad.check_compatible(vm.config)
        except AdapterError as exc:
            raise BundleMismatchError(str(exc)) from None
        adapters.append(ad)
    for ad in adapters:
        vm.attach_adapter(ad)
    for rec in bundle.meta["trainers"]:
        prefix = f"trainer/{rec['job_id']}/"
        tens = {k[len(prefix):]: v.astype(dtype, copy=True) for k, v in bundle.tensors.items() if k.startswith(prefix)}
        rec = dict(rec)
        rec["status"] = PAUSED if rec["status"] == MIGRATING else rec["status"]
        vm.add_trainer(TrainerState.restore(rec, tens))
    return vm
