"""LoRA adapters stored per linear layer and the segmented multi-LoRA product.

A packed batch is described by a :class:`SegmentMap`: contiguous row ranges,
each bound to one adapter slot (or to none, for base-only rows).  For every
linear layer the base projection is one product over all rows, and each
segment adds its own low-rank delta ``scale * (X_s A^T) B^T``.  Adapters are
looked up per linear key (``"layers.{i}.{target}"``), so two adapters in one
batch may target different layers, different modules, and different ranks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .model import TARGETS, ModelConfig
from .tensor import ShapeError, matmul


class AdapterError(ValueError):
    pass


class LoraPair(NamedTuple):
    a: np.ndarray  # [r, in]
    b: np.ndarray  # [out, r]
    scale: float


def linear_key(layer: int, target: str) -> str:
    return f"layers.{layer}.{target}"


@dataclass
class LoraAdapter:
    adapter_id: str
    rank: int
    alpha: float
    weights: dict[str, tuple[np.ndarray, np.ndarray]]
    baked: bool = False
    dynamic_scale: float | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise AdapterError("rank must be >= 1")
        for key, (a, b) in self.weights.items():
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise AdapterError(f"{self.adapter_id}/{key}: factors {a.shape}, {b.shape} disagree with r={self.rank}")

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        adapter_id: str,
        rank: int = 8,
        alpha: float = 16.0,
        targets: Iterable[str] = TARGETS,
        layers: Iterable[int] | None = None,
        seed: int = 0,
        std: float = 0.02,
        b_std: float = 0.0,
    ) -> "LoraAdapter":
        """Gaussian ``A``; ``B`` zero unless ``b_std`` is given (so a fresh
        fine-tuning adapter leaves the base output untouched)."""
        targets = tuple(targets)
        unknown = set(targets) - set(TARGETS)
        if unknown:
            raise AdapterError(f"unknown target modules {sorted(unknown)}")
        rng = np.random.default_rng(seed)
        layers = range(config.n_layers) if layers is None else layers
        weights = {}
        for layer in layers:
            for t in TARGETS:
                if t not in targets:
                    continue
                out_dim, in_dim = config.linear_shape(t)
                a = rng.normal(0.0, std, size=(rank, in_dim)).astype(config.np_dtype)
                b = rng.normal(0.0, b_std, size=(out_dim, rank)).astype(config.np_dtype) if b_std else \
                    np.zeros((out_dim, rank), dtype=config.np_dtype)
                weights[linear_key(layer, t)] = (a, b)
        return cls(adapter_id, rank, float(alpha), weights)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def live_scaling(self) -> float:
        return 1.0 if self.baked else self.scaling

    @property
    def targets(self) -> set[str]:
        return {k.rsplit(".", 1)[1] for k in self.weights}

    def pair(self, key: str) -> LoraPair | None:
        if key not in self.weights:
            return None
        a, b = self.weights[key]
        return LoraPair(a, b, self.live_scaling)

    def lora_pair(self, layer: int, target: str) -> LoraPair | None:
        return self.pair(linear_key(layer, target))

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor."""
        out = {}
        for key in sorted(self.weights):
            a, b = self.weights[key]
            out[f"{key}.A"] = a
            out[f"{key}.B"] = b
        return out

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes + b.nbytes for a, b in self.weights.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params().items():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def copy(self) -> "LoraAdapter":
        weights = {k: (a.copy(), b.copy()) for k, (a, b) in self.weights.items()}
        return LoraAdapter(self.adapter_id, self.rank, self.alpha, weights, self.baked, self.dynamic_scale)

    def check_compatible(self, config: ModelConfig) -> None:
        for key, (a, b) in self.weights.items():
            _, layer, target = key.split(".")
            if int(layer) >= config.n_layers or target not in TARGETS:
                raise AdapterError(f"{self.adapter_id}: no linear {key} in base model")
            out_dim, in_dim = config.linear_shape(target)
            if a.shape[1] != in_dim or b.shape[0] != out_dim:
                raise AdapterError(f"{self.adapter_id}/{key}: shape mismatch with base ({out_dim}, {in_dim})")

    def metadata(self) -> dict:
        return {"adapter_id": self.adapter_id, "rank": self.rank, "alpha": self.alpha,
                "targets": sorted(self.targets), "keys": sorted(self.weights),
                "baked": self.baked, "dynamic_scale": self.dynamic_scale}


def bake_static_scaling(adapter: LoraAdapter) -> LoraAdapter:
    """Fold ``alpha / r`` into ``B``; the returned adapter has live scale 1."""
    if adapter.baked:
        raise AdapterError(f"adapter {adapter.adapter_id} is already baked")
    s = adapter.scaling
    weights = {k: (a.copy(), b * s if s != 1.0 else b.copy()) for k, (a, b) in adapter.weights.items()}
    return LoraAdapter(adapter.adapter_id, adapter.rank, adapter.alpha, weights, True, adapter.dynamic_scale)


def validate_dynamic_scale(scale: float) -> float:
    scale = float(scale)
    if not math.isfinite(scale) or scale <= 0.0:
        raise ValueError(f"dynamic scale must be finite and > 0, got {scale}")
    return scale


def apply_dynamic_scale(binding, scale: float) -> None:
    """Multiply the LoRA delta of one request's rows by ``scale``.

    ``binding`` is any per-request object carrying a ``dynamic_scale``
    attribute (a flow work item or a runtime request).  The factor composes
    multiplicatively with the adapter's live (static or baked) scale.
    """
    binding.dynamic_scale = validate_dynamic_scale(scale)


@dataclass(frozen=True)
class Segment:
    row_start: int
    row_count: int
    adapter_slot: int | None
    scale: float = 1.0  # per-request dynamic factor

    @property
    def rows(self) -> slice:
        return slice(self.row_start, self.row_start + self.row_count)


@dataclass(frozen=True)
class SegmentMap:
    segments: tuple[Segment, ...]
    total_rows: int = field(init=False)

    def __post_init__(self):
        pos = 0
        for s in self.segments:
            if s.row_start != pos or s.row_count < 1:
                raise ShapeError("segments must be contiguous, non-empty and start at row 0")
            pos += s.row_count
        object.__setattr__(self, "total_rows", pos)

    @classmethod
    def from_rows(cls, slots: Sequence[int | None], scales: Sequence[float] | None = None) -> "SegmentMap":
        """Group consecutive rows sharing ``(slot, scale)`` into segments."""
        scales = [1.0] * len(slots) if scales is None else list(scales)
        segs: list[Segment] = []
        start = 0
        for i in range(1, len(slots) + 1):
            if i == len(slots) or slots[i] != slots[start] or scales[i] != scales[start]:
                segs.append(Segment(start, i - start, slots[start], scales[start]))
                start = i
        return cls(tuple(segs))

    def restrict(self, n_rows: int) -> "SegmentMap":
        """The map of rows ``[0, n_rows)``."""
        out = []
        for s in self.segments:
            if s.row_start >= n_rows:
                break
            out.append(Segment(s.row_start, min(s.row_count, n_rows - s.row_start), s.adapter_slot, s.scale))
        return SegmentMap(tuple(out))


def _check(x, base_w, seg, adapters):
    if seg.total_rows != x.shape[0]:
        raise ShapeError(f"segment map covers {seg.total_rows} rows, input has {x.shape[0]}")
    if base_w.shape[1] != x.shape[1]:
        raise ShapeError(f"base weight {base_w.shape} cannot take input of width {x.shape[1]}")
    for s in seg.segments:
        if s.adapter_slot is None:
            continue
        if not 0 <= s.adapter_slot < len(adapters):
            raise IndexError(f"adapter slot {s.adapter_slot} out of range ({len(adapters)} adapters)")
        p = adapters[s.adapter_slot]
        if p is not None and (p.a.shape[1] != x.shape[1] or p.b.shape[0] != base_w.shape[0]
                              or p.a.shape[0] != p.b.shape[1]):
            raise ShapeError(f"adapter in slot {s.adapter_slot} has shapes {p.a.shape}, {p.b.shape}")


def smlm_forward(
    x: np.ndarray,
    base_w: np.ndarray,
    seg: SegmentMap,
    adapters: Sequence[LoraPair | None],
    lora_mask: np.ndarray | None = None,
) -> np.ndarray:
    """``Y = X W^T`` plus, per segment, ``scale * (X_s A^T) B^T``.

    ``adapters[slot]`` is the pair for this linear (``None`` when the adapter
    does not target it).  ``lora_mask`` optionally multiplies the LoRA input
    (dropout on fine-tuning rows); the base path never sees it.
    """
    _check(x, base_w, seg, adapters)
    y = matmul(x, base_w.T)
    for s in seg.segments:
        if s.adapter_slot is None or adapters[s.adapter_slot] is None:
            continue
        a, b, scale = adapters[s.adapter_slot]
        xs = x[s.rows] if lora_mask is None else x[s.rows] * lora_mask[s.rows]
        y[s.rows] = y[s.rows] + (scale * s.scale) * matmul(matmul(xs, a.T), b.T)
    return y


def smlm_backward_lora(
    x: np.ndarray,
    dy: np.ndarray,
    base_w: np.ndarray,
    seg: SegmentMap,
    adapters: Sequence[LoraPair | None],
    grad_mask: set[int],
    lora_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Backward of :func:`smlm_forward`.

    Returns ``dX`` (always complete: base path plus every segment's LoRA
    path) and ``{slot: (dA, dB)}`` for each slot with a pair on this linear.
    Slots outside ``grad_mask`` get exact zero matrices.
    """
    _check(x, base_w, seg, adapters)
    dx = matmul(dy, base_w)
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for s in seg.segments:
        slot = s.adapter_slot
        if slot is None or adapters[slot] is None:
            continue
        a, b, scale = adapters[slot]
        c = scale * s.scale
        m = None if lora_mask is None else lora_mask[s.rows]
        xs = x[s.rows] if m is None else x[s.rows] * m
        dz = c * matmul(dy[s.rows], b)
        dxs = matmul(dz, a)
        dx[s.rows] = dx[s.rows] + (dxs if m is None else dxs * m)
        if slot not in grads:
            grads[slot] = (np.zeros_like(a), np.zeros_like(b))
        if slot in grad_mask:
            da, db = grads[slot]
            da += matmul(dz.T, xs)
            db += c * matmul(dy[s.rows].T, matmul(xs, a.T))
    return dx, grads


class AdapterTable:
    """Slot-indexed adapters of one batch."""

    def __init__(self, adapters: Sequence[LoraAdapter] = ()):
        self.adapters = list(adapters)
        self._slots = {ad.adapter_id: i for i, ad in enumerate(self.adapters)}

    def slot(self, adapter_id: str | None) -> int | None:
        if adapter_id is None:
            return None
        return self._slots[adapter_id]

    def add(self, adapter: LoraAdapter) -> int:
        if adapter.adapter_id not in self._slots:
            self._slots[adapter.adapter_id] = len(self.adapters)
            self.adapters.append(adapter)
        return self._slots[adapter.adapter_id]

    def for_linear(self, key: str) -> list[LoraPair | None]:
        return [ad.pair(key) for ad in self.adapters]

    def __len__(self):
        return len(self.adapters)

    def __contains__(self, adapter_id: str) -> bool:
        return adapter_id in self._slots
