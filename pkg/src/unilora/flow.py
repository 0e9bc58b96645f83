"""Unified forward/backward over a packed batch of mixed request kinds.

Row layout of a :class:`UnifiedBatch` is fixed: fine-tuning rows, then
evaluation rows, then prefill rows, then one row per decode.  Every linear
layer runs once over all rows through :func:`smlm_forward`; attention splits
into three branches:

* fine-tune rows: per-sequence causal attention, probabilities kept for the
  backward sweep;
* evaluation + prefill rows: per-sequence causal attention, prefills write
  their fresh KV cache, evaluations keep nothing;
* decode rows: append one key/value to the request's cache and attend over it.

Branch outputs land back in row order before the shared output projection.
Losses are computed per fine-tune/evaluation job on that job's own logit span
and divided by the job's accumulation steps; a single backward sweep over the
sum of the fine-tune losses yields per-adapter gradients.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mixed_lora import (
    AdapterError,
    AdapterTable,
    LoraAdapter,
    SegmentMap,
    linear_key,
    smlm_backward_lora,
    smlm_forward,
    validate_dynamic_scale,
)
from .model import TARGETS, BaseWeights, CacheError, KvCache, ModelConfig, attend
from .tensor import (
    cross_entropy_shifted,
    embedding,
    matmul,
    rms_norm,
    rms_norm_backward,
    rope,
    silu,
    silu_backward,
    softmax_backward,
)

IGNORE_ID = -100
MAX_ACCUMULATION = 65536


class Kind(str, Enum):
    FINETUNE = "finetune"
    EVALUATE = "evaluate"
    PREFILL = "prefill"
    DECODE = "decode"


class BudgetError(ValueError):
    pass


class AmbiguousOwnershipError(ValueError):
    pass


@dataclass
class Work:
    """One request's contribution to a unified step.

    ``tokens`` is ``[B, S]`` for fine-tuning, ``[L]`` for evaluation and
    prefill, and a single token for decode.
    """

    key: str
    kind: Kind
    tokens: np.ndarray
    adapter_id: str | None = None
    labels: np.ndarray | None = None
    accumulation: int = 1
    cache: KvCache | None = None
    dynamic_scale: float | None = None
    dropout: float = 0.0
    dropout_seed: tuple[int, ...] = ()

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.kind is Kind.DECODE:
            self.tokens = self.tokens.reshape(1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def rows(self) -> int:
        return int(self.tokens.size)


@dataclass
class UnifiedBatch:
    config: ModelConfig
    finetune: list[Work]
    evaluate: list[Work]
    prefill: list[Work]
    decode: list[Work]
    tokens: np.ndarray
    positions: np.ndarray
    seg: SegmentMap
    table: AdapterTable
    spans: dict[str, tuple[int, int]]

    @property
    def F(self) -> list[tuple[int, int]]:
        return [tuple(w.tokens.shape) for w in self.finetune]

    @property
    def E(self) -> list[int]:
        return [w.rows for w in self.evaluate]

    @property
    def P(self) -> list[int]:
        return [w.rows for w in self.prefill]

    @property
    def D(self) -> int:
        return len(self.decode)

    @property
    def n_rows(self) -> int:
        return int(self.tokens.size)

    @property
    def n_finetune_rows(self) -> int:
        return sum(w.rows for w in self.finetune)

    def works(self) -> list[Work]:
        return self.finetune + self.evaluate + self.prefill + self.decode


def assemble_batch(
    works: Sequence[Work],
    adapters: Mapping[str, LoraAdapter],
    config: ModelConfig,
    budget: int | None = None,
) -> UnifiedBatch:
    """Pack requests into the fixed F | E | P | D row layout."""
    if not works:
        raise ValueError("cannot assemble an empty batch")
    groups: dict[Kind, list[Work]] = {k: [] for k in Kind}
    seen = set()
    for w in works:
        if w.key in seen:
            raise ValueError(f"duplicate work key {w.key!r}")
        seen.add(w.key)
        _validate_work(w, config)
        if w.adapter_id is not None and w.adapter_id not in adapters:
            raise AdapterError(f"adapter {w.adapter_id!r} is not bound")
        groups[w.kind].append(w)

    ordered = groups[Kind.FINETUNE] + groups[Kind.EVALUATE] + groups[Kind.PREFILL] + groups[Kind.DECODE]
    total = sum(w.rows for w in ordered)
    if budget is not None and total > budget:
        raise BudgetError(f"batch of {total} rows exceeds budget {budget}")

    table = AdapterTable()
    tokens, positions, slots, scales = [], [], [], []
    spans = {}
    row = 0
    for w in ordered:
        ad = adapters[w.adapter_id] if w.adapter_id is not None else None
        slot = table.add(ad) if ad is not None else None
        dyn = w.dynamic_scale if w.dynamic_scale is not None else (ad.dynamic_scale if ad else None)
        dyn = 1.0 if dyn is None else validate_dynamic_scale(dyn)
        if w.kind is Kind.FINETUNE:
            b, s = w.tokens.shape
            pos = np.tile(np.arange(s), b)
        elif w.kind is Kind.DECODE:
            pos = np.array([w.cache.length])
        else:
            pos = np.arange(w.rows)
        tokens.append(w.tokens.reshape(-1))
        positions.append(pos)
        slots += [slot] * w.rows
        scales += [dyn] * w.rows
        spans[w.key] = (row, w.rows)
        row += w.rows

    return UnifiedBatch(
        config=config,
        finetune=groups[Kind.FINETUNE],
        evaluate=groups[Kind.EVALUATE],
        prefill=groups[Kind.PREFILL],
        decode=groups[Kind.DECODE],
        tokens=np.concatenate(tokens),
        positions=np.concatenate(positions),
        seg=SegmentMap.from_rows(slots, scales),
        table=table,
        spans=spans,
    )


def _validate_work(w: Work, config: ModelConfig) -> None:
    if w.tokens.size and (w.tokens.min() < 0 or w.tokens.max() >= config.vocab_size):
        raise ValueError(f"{w.key}: token id outside vocabulary")
    if w.kind is Kind.FINETUNE:
        if w.tokens.ndim != 2 or min(w.tokens.shape) < 1:
            raise ValueError(f"{w.key}: fine-tune tokens must be [B, S]")
        if w.tokens.shape[1] > config.max_seq:
            raise ValueError(f"{w.key}: sequence longer than max_seq")
    elif w.kind in (Kind.EVALUATE, Kind.PREFILL):
        if w.tokens.ndim != 1 or w.rows < 1 or w.rows > config.max_seq:
            raise ValueError(f"{w.key}: expected 1 <= len <= max_seq tokens")
    if w.kind in (Kind.FINETUNE, Kind.EVALUATE):
        if w.labels is None or w.labels.shape != w.tokens.shape:
            raise ValueError(f"{w.key}: labels missing or misshapen")
        if not 1 <= w.accumulation <= MAX_ACCUMULATION:
            raise ValueError(f"{w.key}: accumulation steps must be in [1, {MAX_ACCUMULATION}]")
    if w.kind is Kind.PREFILL and (w.cache is None or w.cache.length != 0):
        raise CacheError(f"{w.key}: prefill needs an empty cache")
    if w.kind is Kind.DECODE:
        if w.cache is None or w.cache.length < 1:
            raise CacheError(f"{w.key}: decode needs a prefilled cache")
        if w.cache.length >= config.max_seq:
            raise CacheError(f"{w.key}: cache is full")
    if not 0.0 <= w.dropout < 1.0:
        raise ValueError(f"{w.key}: dropout must be in [0, 1)")


@dataclass
class _LayerTape:
    x: np.ndarray
    n1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: list[np.ndarray]
    attn: np.ndarray
    h_mid: np.ndarray
    n2: np.ndarray
    up: np.ndarray
    gate: np.ndarray
    act: np.ndarray
    masks: dict[str, np.ndarray]


@dataclass
class _Tape:
    n_rows: int
    layers: list[_LayerTape] = field(default_factory=list)
    h_final: np.ndarray | None = None


def _dropout_masks(batch: UnifiedBatch, layer: int) -> dict[str, np.ndarray]:
    """Inverted-dropout masks on the LoRA input of fine-tune rows only."""
    if not any(w.dropout > 0 for w in batch.finetune):
        return {}
    cfg = batch.config
    masks = {}
    for ti, t in enumerate(TARGETS):
        width = cfg.linear_shape(t)[1]
        m = np.ones((batch.n_rows, width), dtype=cfg.np_dtype)
        for w in batch.finetune:
            if w.dropout <= 0:
                continue
            start, count = batch.spans[w.key]
            rng = np.random.default_rng([*w.dropout_seed, layer, ti])
            keep = rng.random((count, width)) >= w.dropout
            m[start : start + count] = keep / (1.0 - w.dropout)
        masks[t] = m
    return masks


def attention_layer_forward(
    weights: BaseWeights,
    layer: int,
    batch: UnifiedBatch,
    x: np.ndarray,
    tape: _LayerTape | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Attention for all rows of ``batch``; ``x`` is the normed hidden state.

    Q/K/V/O projections run jointly over every row; the attention itself is
    dispatched per branch.  When ``tape`` is given, fine-tune rows record what
    the backward sweep needs.
    """
    cfg = weights.config
    n, nh, hd = x.shape[0], cfg.n_heads, cfg.head_dim
    masks = masks or {}
    seg, table, pos = batch.seg, batch.table, batch.positions

    def proj(inp, t):
        key = linear_key(layer, t)
        return smlm_forward(inp, weights[key], seg, table.for_linear(key), masks.get(t))

    q = rope(proj(x, "q").reshape(n, nh, hd), pos, cfg.rope_theta)
    k = rope(proj(x, "k").reshape(n, nh, hd), pos, cfg.rope_theta)
    v = proj(x, "v").reshape(n, nh, hd)
    out = np.zeros((n, cfg.hidden), dtype=x.dtype)
    row = 0

    if batch.F:
        probs = []
        for b, s in batch.F:
            for _ in range(b):
                r = slice(row, row + s)
                out[r], p = attend(q[r], k[r], v[r], pos[r], pos[r])
                probs.append(p)
                row += s
        if tape is not None:
            tape.q, tape.k, tape.v, tape.probs = q[:row], k[:row], v[:row], probs

    if batch.E or batch.P:
        for w in batch.evaluate + batch.prefill:
            r = slice(row, row + w.rows)
            if w.kind is Kind.PREFILL:
                w.cache.write(layer, 0, k[r], v[r])
            out[r], _ = attend(q[r], k[r], v[r], pos[r], pos[r])
            row += w.rows

    if batch.D:
        for w in batch.decode:
            p = w.cache.length
            w.cache.write(layer, p, k[row : row + 1], v[row : row + 1])
            keys, vals = w.cache.view(layer, p + 1)
            out[row : row + 1], _ = attend(q[row : row + 1], keys, vals, pos[row : row + 1], np.arange(p + 1))
            row += 1

    if tape is not None:
        tape.attn = out[: tape.x.shape[0]]
    return proj(out, "o")


@dataclass
class LossEntry:
    key: str
    kind: Kind
    adapter_id: str | None
    loss: float
    scaled_loss: float
    accumulation: int


@dataclass
class LossReport:
    batch: UnifiedBatch
    logits: np.ndarray
    entries: list[LossEntry]
    _dlogits: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _tape: _Tape | None = field(default=None, repr=False)

    def loss(self, key: str) -> LossEntry:
        for e in self.entries:
            if e.key == key:
                return e
        raise KeyError(key)

    def logits_for(self, key: str) -> np.ndarray:
        start, count = self.batch.spans[key]
        return self.logits[start : start + count]

    def next_token_logits(self, key: str) -> np.ndarray:
        """Last-row logits of a prefill or decode request."""
        return self.logits_for(key)[-1]


def causal_lm_forward(weights: BaseWeights, batch: UnifiedBatch, needs_grad: bool = True) -> LossReport:
    """Logits for every row, plus a separately tracked loss per F/E job.

    Prefill caches are committed at their prompt length and decode caches
    grow by one once all layers have run.
    """
    cfg = weights.config
    n_f = batch.n_finetune_rows
    tape = _Tape(n_f) if needs_grad and n_f else None
    seg, table = batch.seg, batch.table

    def proj(inp, layer, t, masks):
        key = linear_key(layer, t)
        return smlm_forward(inp, weights[key], seg, table.for_linear(key), masks.get(t))

    h = embedding(weights["embed"], batch.tokens)
    for layer in range(cfg.n_layers):
        masks = _dropout_masks(batch, layer)
        n1 = rms_norm(h, weights[f"layers.{layer}.attn_norm"], cfg.norm_eps)
        lt = None
        if tape is not None:
            lt = _LayerTape(h[:n_f], n1[:n_f], *(None,) * 11)
            lt.masks = {t: m[:n_f] for t, m in masks.items()}
        h_mid = h + attention_layer_forward(weights, layer, batch, n1, lt, masks)
        n2 = rms_norm(h_mid, weights[f"layers.{layer}.mlp_norm"], cfg.norm_eps)
        up = proj(n2, layer, "up", masks)
        gate = proj(n2, layer, "gate", masks)
        act = silu(gate) * up
        h = h_mid + proj(act, layer, "down", masks)
        if lt is not None:
            lt.h_mid, lt.n2, lt.up, lt.gate, lt.act = h_mid[:n_f], n2[:n_f], up[:n_f], gate[:n_f], act[:n_f]
            tape.layers.append(lt)

    if tape is not None:
        tape.h_final = h[:n_f]
    logits = matmul(rms_norm(h, weights["final_norm"], cfg.norm_eps), weights["lm_head"])

    entries, dlogits = [], {}
    for w in batch.finetune + batch.evaluate:
        span = logits[slice(*_span(batch, w.key))]
        lg = span.reshape(*w.tokens.shape, -1)
        loss, dl = cross_entropy_shifted(lg, w.labels, IGNORE_ID)
        entries.append(LossEntry(w.key, w.kind, w.adapter_id, loss, loss / w.accumulation, w.accumulation))
        if w.kind is Kind.FINETUNE:
            dlogits[w.key] = dl.reshape(span.shape)

    for w in batch.prefill:
        w.cache.commit(w.rows)
    for w in batch.decode:
        w.cache.commit(w.cache.length + 1)
    return LossReport(batch, logits, entries, dlogits, tape)


def _span(batch, key):
    start, count = batch.spans[key]
    return start, start + count


def _attention_backward(lt: _LayerTape, batch: UnifiedBatch, dout: np.ndarray, head_dim: int):
    """Gradients wrt the rotated q, rotated k and v of the fine-tune rows."""
    n = dout.shape[0]
    dq, dk, dv = (np.zeros_like(lt.q) for _ in range(3))
    scale = 1.0 / math.sqrt(head_dim)
    row, i = 0, 0
    for b, s in batch.F:
        for _ in range(b):
            r = slice(row, row + s)
            p = lt.probs[i]
            do = dout[r].reshape(s, -1, head_dim).transpose(1, 0, 2)
            vh = lt.v[r].transpose(1, 0, 2)
            qh = lt.q[r].transpose(1, 0, 2)
            kh = lt.k[r].transpose(1, 0, 2)
            dv[r] = np.matmul(p.transpose(0, 2, 1), do).transpose(1, 0, 2)
            ds = softmax_backward(p, np.matmul(do, vh.transpose(0, 2, 1)), scale)
            dq[r] = np.matmul(ds, kh).transpose(1, 0, 2)
            dk[r] = np.matmul(ds.transpose(0, 2, 1), qh).transpose(1, 0, 2)
            row += s
            i += 1
    assert row == n
    return dq, dk, dv


def backward_finetune(
    weights: BaseWeights,
    report: LossReport,
    grad_masks: Mapping[str, Iterable[str]],
) -> dict[str, dict[str, np.ndarray]]:
    """One reverse sweep over ``sum(loss_j / A_j)`` for the jobs in ``grad_masks``.

    ``grad_masks`` maps a fine-tune job key to the adapter ids that job may
    update.  Jobs absent from the mapping contribute no loss.  Returns
    ``{adapter_id: {"layers.i.t.A": dA, "layers.i.t.B": dB, ...}}`` for every
    masked-in adapter; base weights never receive a gradient.
    """
    tape = report._tape
    batch = report.batch
    if tape is None:
        raise ValueError("report has no fine-tune tape (no fine-tune rows, or run without gradients)")
    owner: dict[str, str] = {}
    for job, ids in grad_masks.items():
        if job not in report._dlogits:
            raise KeyError(f"{job!r} is not a fine-tune job of this report")
        for aid in ids:
            if aid in owner:
                raise AmbiguousOwnershipError(f"adapter {aid!r} claimed by {owner[aid]!r} and {job!r}")
            owner[aid] = job
    slots = {batch.table.slot(aid): aid for aid in owner if aid in batch.table}
    mask = set(slots)

    cfg = weights.config
    n, nh, hd = tape.n_rows, cfg.n_heads, cfg.head_dim
    seg = batch.seg.restrict(n)
    pos = batch.positions[:n]
    table = batch.table
    acc = {w.key: w.accumulation for w in batch.finetune}

    dlogits = np.zeros((n, cfg.vocab_size), dtype=report.logits.dtype)
    for job in grad_masks:
        start, end = _span(batch, job)
        dlogits[start:end] = report._dlogits[job] / acc[job]

    grads: dict[str, dict[str, np.ndarray]] = defaultdict(dict)

    def back(inp, dy, layer, t, masks):
        key = linear_key(layer, t)
        dx, g = smlm_backward_lora(inp, dy, weights[key], seg, table.for_linear(key), mask, masks.get(t))
        for slot, (da, db) in g.items():
            if slot in mask:
                grads[slots[slot]][f"{key}.A"] = da
                grads[slots[slot]][f"{key}.B"] = db
        return dx

    dnf = matmul(dlogits, weights["lm_head"].T)
    dh = rms_norm_backward(tape.h_final, weights["final_norm"], cfg.norm_eps, dnf)[0]
    for layer in reversed(range(cfg.n_layers)):
        lt = tape.layers[layer]
        dact = back(lt.act, dh, layer, "down", lt.masks)
        dgate = silu_backward(lt.gate, dact * lt.up)
        dup = dact * silu(lt.gate)
        dn2 = back(lt.n2, dup, layer, "up", lt.masks) + back(lt.n2, dgate, layer, "gate", lt.masks)
        dh_mid = dh + rms_norm_backward(lt.h_mid, weights[f"layers.{layer}.mlp_norm"], cfg.norm_eps, dn2)[0]

        dattn = back(lt.attn, dh_mid, layer, "o", lt.masks)
        dq, dk, dv = _attention_backward(lt, batch, dattn, hd)
        dq = rope(dq, pos, cfg.rope_theta, inverse=True).reshape(n, -1)
        dk = rope(dk, pos, cfg.rope_theta, inverse=True).reshape(n, -1)
        dn1 = (back(lt.n1, dq, layer, "q", lt.masks) + back(lt.n1, dk, layer, "k", lt.masks)
               + back(lt.n1, dv.reshape(n, -1), layer, "v", lt.masks))
        dh = dh_mid + rms_norm_backward(lt.x, weights[f"layers.{layer}.attn_norm"], cfg.norm_eps, dn1)[0]

    for aid in owner:
        grads.setdefault(aid, {})
    return dict(grads)
