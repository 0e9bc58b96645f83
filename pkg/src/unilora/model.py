"""Toy Llama-shaped causal LM: shared frozen base weights, KV cache, and the
single-sequence reference paths (``forward_full``, ``prefill``, ``decode_step``).

The packed multi-request path lives in :mod:`unilora.flow`; the functions here
process one sequence at a time and serve both as the plain inference API and
as the oracle the packed path is checked against.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from . import container
from .tensor import embedding, matmul, rms_norm, rope, silu, softmax_rows

TARGETS = ("q", "k", "v", "o", "up", "gate", "down")


class CacheError(RuntimeError):
    pass


class CacheOverflowError(CacheError):
    pass


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 128
    max_seq: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if (self.hidden // self.n_heads) % 2:
            raise ValueError("head_dim must be even for rotary encoding")
        if self.vocab_size < 4 or self.max_seq < 2:
            raise ValueError("need vocab_size >= 4 and max_seq >= 2")
        if min(self.n_layers, self.mlp_hidden) < 1:
            raise ValueError("n_layers and mlp_hidden must be positive")
        np.dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def linear_shape(self, target: str) -> tuple[int, int]:
        """``(out, in)`` of a target linear."""
        h, m = self.hidden, self.mlp_hidden
        return {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h),
                "up": (m, h), "gate": (m, h), "down": (h, m)}[target]

    def to_dict(self) -> dict:
        return asdict(self)


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, config.hidden)}
    for layer in range(config.n_layers):
        for t in TARGETS:
            shapes[f"layers.{layer}.{t}"] = config.linear_shape(t)
        shapes[f"layers.{layer}.attn_norm"] = (config.hidden,)
        shapes[f"layers.{layer}.mlp_norm"] = (config.hidden,)
    shapes["final_norm"] = (config.hidden,)
    shapes["lm_head"] = (config.hidden, config.vocab_size)
    return shapes


class BaseWeights:
    """Immutable base-model parameters.

    Arrays are copied once on construction and flagged read-only; nothing in
    the package writes to them afterwards.
    """

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        shapes = weight_shapes(config)
        missing = set(shapes) - set(arrays)
        if missing:
            raise ValueError(f"missing base weights: {sorted(missing)}")
        self.config = config
        self._arrays: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.array(arrays[name], dtype=config.np_dtype).reshape(shape)
            arr.setflags(write=False)
            self._arrays[name] = arr

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0, std: float = 0.02) -> "BaseWeights":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in weight_shapes(config).items():
            if len(shape) == 1:
                arrays[name] = np.ones(shape)
            else:
                arrays[name] = rng.normal(0.0, std, size=shape)
        return cls(config, arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def items(self):
        return self._arrays.items()

    def linear(self, layer: int, target: str) -> np.ndarray:
        return self._arrays[f"layers.{layer}.{target}"]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._arrays.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._arrays):
            h.update(name.encode())
            h.update(self._arrays[name].tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        container.save(path, self._arrays, {"kind": "base", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig | None = None) -> "BaseWeights":
        tensors, meta = container.load(path)
        if meta.get("kind") != "base":
            raise container.ContainerError(f"{path}: not a base-weight container")
        stored = ModelConfig(**meta["config"])
        return cls(config or stored, tensors)


class KvCache:
    """Per-sequence keys/values for every layer, ``[len, n_heads, head_dim]``.

    ``write`` stages rows for one layer; ``commit`` publishes the new length
    once every layer has been written, so a step that fails half-way leaves
    the visible length unchanged.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.n_layers, config.max_seq, config.n_heads, config.head_dim)
        self.keys = np.zeros(shape, dtype=config.np_dtype)
        self.values = np.zeros(shape, dtype=config.np_dtype)
        self.length = 0

    def write(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> None:
        if start != self.length:
            raise CacheError(f"write at {start} but cache length is {self.length}")
        end = start + k.shape[0]
        if end > self.config.max_seq:
            raise CacheOverflowError(f"cache would grow to {end} > max_seq={self.config.max_seq}")
        self.keys[layer, start:end] = k
        self.values[layer, start:end] = v

    def view(self, layer: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[layer, :upto], self.values[layer, :upto]

    def commit(self, new_length: int) -> None:
        if new_length < self.length or new_length > self.config.max_seq:
            raise CacheError(f"illegal cache length transition {self.length} -> {new_length}")
        self.length = new_length

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


class AdapterView(Protocol):
    def lora_pair(self, layer: int, target: str) -> tuple[np.ndarray, np.ndarray, float] | None: ...


def attend(q, k, v, q_pos, k_pos):
    """Causal multi-head attention for one sequence.

    ``q`` is ``[n, heads, d]`` and ``k``/``v`` are ``[m, heads, d]``; a query
    at position ``p`` sees keys at positions ``<= p``.  Returns the merged
    ``[n, heads * d]`` output and the probabilities ``[heads, n, m]``.
    """
    n, heads, d = q.shape
    scores = np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0))
    allowed = np.asarray(k_pos)[None, :] <= np.asarray(q_pos)[:, None]
    probs = softmax_rows(scores, 1.0 / math.sqrt(d), allowed[None])
    out = np.matmul(probs, v.transpose(1, 0, 2))
    return out.transpose(1, 0, 2).reshape(n, heads * d), probs


def _proj(x, w, pair, dyn):
    y = matmul(x, w.T)
    if pair is not None:
        a, b, scale = pair
        y = y + (scale * dyn) * matmul(matmul(x, a.T), b.T)
    return y


def _run(weights, tokens, positions, adapter, dyn, cache=None):
    cfg = weights.config
    n = len(tokens)
    nh, hd = cfg.n_heads, cfg.head_dim

    def pair(layer, t):
        return adapter.lora_pair(layer, t) if adapter is not None else None

    h = embedding(weights["embed"], tokens)
    for layer in range(cfg.n_layers):
        lin = lambda t: weights.linear(layer, t)  # noqa: E731
        x = rms_norm(h, weights[f"layers.{layer}.attn_norm"], cfg.norm_eps)
        q = _proj(x, lin("q"), pair(layer, "q"), dyn).reshape(n, nh, hd)
        k = _proj(x, lin("k"), pair(layer, "k"), dyn).reshape(n, nh, hd)
        v = _proj(x, lin("v"), pair(layer, "v"), dyn).reshape(n, nh, hd)
        q = rope(q, positions, cfg.rope_theta)
        k = rope(k, positions, cfg.rope_theta)
        if cache is None:
            keys, vals, kpos = k, v, positions
        else:
            start = int(positions[0])
            cache.write(layer, start, k, v)
            keys, vals = cache.view(layer, start + n)
            kpos = np.arange(start + n)
        a, _ = attend(q, keys, vals, positions, kpos)
        h = h + _proj(a, lin("o"), pair(layer, "o"), dyn)

        x = rms_norm(h, weights[f"layers.{layer}.mlp_norm"], cfg.norm_eps)
        up = _proj(x, lin("up"), pair(layer, "up"), dyn)
        gate = _proj(x, lin("gate"), pair(layer, "gate"), dyn)
        h = h + _proj(silu(gate) * up, lin("down"), pair(layer, "down"), dyn)

    return matmul(rms_norm(h, weights["final_norm"], cfg.norm_eps), weights["lm_head"])


def forward_full(
    weights: BaseWeights,
    tokens,
    adapter: AdapterView | None = None,
    dynamic_scale: float = 1.0,
    position_offset: int = 0,
) -> np.ndarray:
    """Cache-free causal forward over a whole sequence; logits ``[S, V]``.

    ``position_offset`` places the sequence at positions
    ``offset .. offset + S - 1``, as if preceded by masked-off padding.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if position_offset + len(tokens) > weights.config.max_seq:
        raise SequenceTooLongError(f"{position_offset + len(tokens)} > max_seq={weights.config.max_seq}")
    positions = np.arange(position_offset, position_offset + len(tokens))
    return _run(weights, tokens, positions, adapter, dynamic_scale)


def prefill(weights: BaseWeights, tokens, cache: KvCache, adapter: AdapterView | None = None,
            dynamic_scale: float = 1.0) -> np.ndarray:
    """Fill an empty cache with ``tokens``; returns next-token logits ``[V]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if cache.length != 0:
        raise CacheError("prefill needs an empty cache")
    if len(tokens) == 0:
        raise ValueError("empty prompt")
    if len(tokens) > weights.config.max_seq:
        raise SequenceTooLongError(f"prompt of {len(tokens)} > max_seq={weights.config.max_seq}")
    logits = _run(weights, tokens, np.arange(len(tokens)), adapter, dynamic_scale, cache)
    cache.commit(len(tokens))
    return logits[-1]


def decode_step(weights: BaseWeights, token: int, cache: KvCache, adapter: AdapterView | None = None,
                dynamic_scale: float = 1.0) -> np.ndarray:
    """Append one token to the cache; returns next-token logits ``[V]``."""
    if cache.length < 1:
        raise CacheError("decode_step needs a prefilled cache")
    pos = cache.length
    if pos >= weights.config.max_seq:
        raise CacheOverflowError(f"cache is full at max_seq={weights.config.max_seq}")
    logits = _run(weights, np.array([token], dtype=np.int64), np.array([pos]), adapter, dynamic_scale, cache)
    cache.commit(pos + 1)
    return logits[0]


def greedy(logits: np.ndarray) -> int:
    return int(np.argmax(logits))
