"""Trainer state, gradient accumulation and the adapter optimizers.

A :class:`TrainerState` is everything needed to continue a fine-tuning job
bit-exactly somewhere else: job configuration, dataset cursor, accumulation
buffer, optimizer moments and the RNG cursor that seeds LoRA dropout.  It only
ever holds tensors of its own adapter, which is how parameter masking is kept
at the optimizer level.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .mixed_lora import LoraAdapter

RUNNING, PAUSED, MIGRATING, FINISHED = "running", "paused", "migrating", "finished"


def synthetic_sample(seed: int, index: int, length: int, vocab: int) -> np.ndarray:
    """Deterministic arithmetic-progression sequence (learnable by a tiny LM)."""
    rng = np.random.default_rng([seed, index])
    start = int(rng.integers(vocab))
    stride = 1 + seed % 7
    return (start + stride * np.arange(length)) % vocab


@dataclass
class TrainerState:
    job_id: str
    adapter_id: str
    seq_len: int = 32
    batch_size: int = 2
    accumulation: int = 4
    lr: float = 2e-5
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.0
    seed: int = 0
    dataset_size: int = 64
    epochs: int | None = 1
    # progress
    micro_steps: int = 0
    micro_count: int = 0
    optimizer_steps: int = 0
    samples_seen: int = 0
    status: str = RUNNING
    grad_buffer: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    moments: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    queued: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.accumulation < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("accumulation, batch_size must be >= 1 and seq_len >= 2")

    @property
    def rng_cursor(self) -> int:
        return self.micro_steps

    @property
    def exhausted(self) -> bool:
        if self.queued:
            return False
        return self.epochs is not None and self.samples_seen >= self.epochs * self.dataset_size

    @property
    def window_left(self) -> int:
        """Micro-batches still allowed before the next optimizer step."""
        return self.accumulation - self.micro_count

    def next_rows(self) -> int:
        if self.queued:
            return int(self.queued[0][0].size)
        return self.batch_size * self.seq_len

    def microbatch(self, vocab: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """The ``offset``-th upcoming micro-batch, without consuming it.

        Queued samples (fed by traces) go first, one per micro-batch; after
        that the synthetic dataset is read ``batch_size`` samples at a time.
        """
        if offset < len(self.queued):
            toks, labels = self.queued[offset]
            return toks, labels
        base = self.samples_seen + (offset - len(self.queued)) * self.batch_size
        rows = [synthetic_sample(self.seed, (base + i) % self.dataset_size, self.seq_len, vocab)
                for i in range(self.batch_size)]
        toks = np.stack(rows)
        return toks, toks.copy()

    def consume(self, n: int) -> None:
        for _ in range(n):
            if self.queued:
                self.queued.popleft()
            else:
                self.samples_seen += self.batch_size

    def accumulate(self, adapter: LoraAdapter, grads: dict[str, np.ndarray], n_micro: int = 1) -> bool:
        """Add one step's gradients; run the optimizer when the window closes.

        Returns True when parameters were updated.
        """
        if adapter.adapter_id != self.adapter_id:
            raise ValueError(f"trainer {self.job_id} owns {self.adapter_id}, not {adapter.adapter_id}")
        if n_micro < 1 or n_micro > self.window_left:
            raise ValueError(f"{n_micro} micro-batches do not fit the accumulation window")
        params = adapter.params()
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown tensor {name}")
            if name in self.grad_buffer:
                self.grad_buffer[name] += g
            else:
                self.grad_buffer[name] = g.copy()
        self.micro_steps += 1
        self.micro_count += n_micro
        if self.micro_count < self.accumulation:
            return False
        self._optimizer_step(params)
        self.grad_buffer = {}
        self.micro_count = 0
        self.optimizer_steps += 1
        return True

    def flush(self, adapter: LoraAdapter) -> bool:
        """Apply a partially filled accumulation window (end of data)."""
        if not self.micro_count:
            return False
        self._optimizer_step(adapter.params())
        self.grad_buffer = {}
        self.micro_count = 0
        self.optimizer_steps += 1
        return True

    def _optimizer_step(self, params: dict[str, np.ndarray]) -> None:
        if self.optimizer == "sgd":
            for name, g in self.grad_buffer.items():
                params[name] -= self.lr * g
            return
        t = self.optimizer_steps + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in self.grad_buffer.items():
            p = params[name]
            m = self.moments.setdefault(f"m/{name}", np.zeros_like(p))
            v = self.moments.setdefault(f"v/{name}", np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    # serialization -------------------------------------------------------

    def record(self) -> dict[str, Any]:
        """JSON-safe scalar part of the state."""
        skip = {"grad_buffer", "moments", "queued"}
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        out["queued"] = [[t.tolist(), lab.tolist()] for t, lab in self.queued]
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"grad/{k}": v for k, v in self.grad_buffer.items()}
        out.update(self.moments)
        return out

    @classmethod
    def restore(cls, record: dict[str, Any], tensors: dict[str, np.ndarray]) -> "TrainerState":
        rec = dict(record)
        queued = rec.pop("queued", [])
        state = cls(**rec)
        state.queued = deque((np.array(t, dtype=np.int64), np.array(lab, dtype=np.int64)) for t, lab in queued)
        for k, v in tensors.items():
            if k.startswith("grad/"):
                state.grad_buffer[k[5:]] = v
            else:
                state.moments[k] = v
        return state
