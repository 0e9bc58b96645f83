"""Request admission, the unified step loop, SLO accounting and metrics.

One :class:`Runtime` owns every mutable piece of a run: request queues, KV
caches, trainer states (through its :class:`ModelLibrary`) and the metrics
ledger.  Each :meth:`Runtime.step` builds one unified batch, runs a single
forward over it, emits tokens, and on fine-tuning steps runs the shared
backward plus the trainers' optimizer ticks.

Scheduling policy (fixed here, documented in the README):

* decodes first, then prefills/evaluations oldest-first, then fine-tuning;
* fine-tuning only gets what pending inference does not claim, so it concedes
  as load rises and takes the budget back as load falls (``mutable`` mode);
  ``unified`` mode instead reserves a static share for fine-tuning;
* while inference is pending, fine-tune rows ride along only on every
  ``interleave``-th step; with no inference pending every step trains;
* while decodes run, a prefill is deferred if the projected step time would
  push their token gap past the max decoding latency.

Time is virtual by default: a step's duration comes from a :class:`CostModel`
so SLO results are exact and runs are reproducible byte for byte.
"""

from __future__ import annotations

import copy
import json
import math
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .flow import Kind, Work, assemble_batch, backward_finetune, causal_lm_forward
from .mixed_lora import AdapterError, validate_dynamic_scale
from .model import BaseWeights, KvCache, greedy
from .training import FINISHED, PAUSED, RUNNING, TrainerState
from .virtual_module import ModelLibrary

MODES = ("infer", "finetune", "unified", "mutable")
INFERENCE_KINDS = ("prefill", "evaluate")


@dataclass(frozen=True)
class SloPolicy:
    max_waiting_s: float = 6.0
    mean_decoding_ms: float = 200.0
    max_decoding_ms: float = 1000.0

    def __post_init__(self):
        for name in ("max_waiting_s", "mean_decoding_ms", "max_decoding_ms"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"SLO {name} must be positive, got {v}")


@dataclass(frozen=True)
class CostModel:
    """Virtual step duration: fixed overhead plus per-row forward/backward cost."""

    overhead_ms: float = 10.0
    forward_row_ms: float = 0.5
    backward_row_ms: float = 1.0

    def duration(self, rows: int, finetune_rows: int) -> float:
        return self.overhead_ms + self.forward_row_ms * rows + self.backward_row_ms * finetune_rows


@dataclass
class Request:
    request_id: str
    kind: str
    tokens: np.ndarray
    adapter_id: str | None = None
    labels: np.ndarray | None = None
    max_new_tokens: int = 1
    arrival_ms: float | None = None
    dynamic_scale: float | None = None
    state: str = "queued"
    first_scheduled_ms: float | None = None
    first_token_ms: float | None = None
    token_ms: list[float] = field(default_factory=list)
    finished_ms: float | None = None
    generated: list[int] = field(default_factory=list)
    loss: float | None = None
    cache: KvCache | None = field(default=None, repr=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def wait_ms(self) -> float | None:
        if self.first_scheduled_ms is None:
            return None
        return self.first_scheduled_ms - self.arrival_ms

    @property
    def decode_gaps_ms(self) -> np.ndarray:
        return np.diff(np.asarray(self.token_ms, dtype=np.float64))


@dataclass(frozen=True)
class Verdict:
    request_id: str
    attained: bool
    reasons: tuple[str, ...]
    wait_ms: float | None
    mean_gap_ms: float
    max_gap_ms: float
    tokens: int
    finished_ms: float | None


def slo_verdict(request: Request, policy: SloPolicy) -> Verdict:
    """Attained iff the wait and both inter-token latency clauses hold.

    The mean gap is taken over the request's whole decode lifetime.  A
    request that never finished misses with reason ``"unfinished"``.
    """
    reasons = []
    wait = request.wait_ms
    if wait is not None and wait > policy.max_waiting_s * 1000.0:
        reasons.append("waiting")
    gaps = request.decode_gaps_ms
    mean_gap = float(gaps.mean()) if gaps.size else 0.0
    max_gap = float(gaps.max()) if gaps.size else 0.0
    if mean_gap > policy.mean_decoding_ms:
        reasons.append("mean_decoding_latency")
    if max_gap > policy.max_decoding_ms:
        reasons.append("max_decoding_latency")
    if request.finished_ms is None:
        reasons.append("unfinished")
    return Verdict(request.request_id, not reasons, tuple(reasons), wait, mean_gap, max_gap,
                   len(request.generated), request.finished_ms)


@dataclass(frozen=True)
class Allocation:
    decode_slots: int
    prefill_rows: int
    n_prefills: int
    finetune_rows: int
    n_micro: int

    @property
    def total(self) -> int:
        return self.decode_slots + self.prefill_rows + self.finetune_rows


def allocate_capacity(
    pending_decodes: int,
    prefill_lengths: Sequence[int],
    finetune_micro_rows: Sequence[int],
    budget: int,
    mode: str = "mutable",
    finetune_share: float = 0.5,
    row_cap: int | None = None,
) -> Allocation:
    """Split one step's row budget between decode, prefill and fine-tuning.

    ``prefill_lengths`` is the FIFO queue of prefill/evaluation row counts;
    ``finetune_micro_rows`` lists the next micro-batch size of each trainer in
    service order.  Fine-tuning gets whole micro-batches from the rows left
    after the inference *demand* (what is pending, not only what fits this
    step), which keeps fine-tune rows non-increasing in the inference load.
    ``row_cap`` bounds decode plus prefill rows (the runtime's latency gate);
    it defers prefills but does not lower the demand fine-tuning yields to.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "finetune":
        pending_decodes, prefill_lengths = 0, ()
    if mode == "infer":
        finetune_micro_rows = ()

    decode = min(pending_decodes, budget)
    inf_space = budget
    if mode == "unified" and finetune_micro_rows:
        inf_space = max(budget - int(finetune_share * budget), decode)

    prefill_space = inf_space if row_cap is None else min(inf_space, row_cap)
    prefill_rows = n_prefills = 0
    for n in prefill_lengths:
        if decode + prefill_rows + n > prefill_space:
            break
        prefill_rows += n
        n_prefills += 1

    demand = min(inf_space, decode + sum(prefill_lengths))
    space = budget - demand
    ft_rows = n_micro = 0
    for n in finetune_micro_rows:
        if ft_rows + n > space:
            break
        ft_rows += n
        n_micro += 1
    return Allocation(decode, prefill_rows, n_prefills, ft_rows, n_micro)


@dataclass
class StepReport:
    start_ms: float
    duration_ms: float = 0.0
    finetune_rows: int = 0
    evaluate_rows: int = 0
    prefill_rows: int = 0
    decode_rows: int = 0
    allocation: Allocation | None = None
    losses: dict[str, float] = field(default_factory=dict)
    emitted: dict[str, int] = field(default_factory=dict)
    optimizer_steps: list[str] = field(default_factory=list)
    finished: list[str] = field(default_factory=list)

    @property
    def rows(self) -> int:
        return self.finetune_rows + self.evaluate_rows + self.prefill_rows + self.decode_rows


class MetricsLedger:
    """Timestamped counters plus per-request verdicts of one run."""

    def __init__(self):
        self.arrivals: list[float] = []
        self.decode_tokens: list[tuple[float, int]] = []
        self.finetune_tokens: list[tuple[float, int]] = []
        self.evaluate_tokens: list[tuple[float, int]] = []
        self.completed: list[tuple[float, str]] = []
        self.steps: list[dict] = []
        self.verdicts: dict[str, Verdict] = {}

    def record_step(self, rep: StepReport) -> None:
        end = rep.start_ms + rep.duration_ms
        self.steps.append({"start_ms": rep.start_ms, "duration_ms": rep.duration_ms,
                           "finetune_rows": rep.finetune_rows, "evaluate_rows": rep.evaluate_rows,
                           "prefill_rows": rep.prefill_rows, "decode_rows": rep.decode_rows})
        if rep.emitted:
            self.decode_tokens.append((end, len(rep.emitted)))
        if rep.finetune_rows:
            self.finetune_tokens.append((end, rep.finetune_rows))
        if rep.evaluate_rows:
            self.evaluate_tokens.append((end, rep.evaluate_rows))

    def attainment(self, upto_ms: float | None = None) -> float:
        vs = [v for v in self.verdicts.values()
              if upto_ms is None or (v.finished_ms is not None and v.finished_ms < upto_ms)]
        if not vs:
            return 1.0
        return sum(v.attained for v in vs) / len(vs)

    @property
    def end_ms(self) -> float:
        times = [0.0] + self.arrivals + [t for t, _ in self.decode_tokens + self.finetune_tokens + self.evaluate_tokens]
        return max(times)

    def buckets(self, width_ms: float = 1000.0, end_ms: float | None = None) -> list[dict]:
        """Per-bucket rates (per second) over ``[0, end_ms]``."""
        if width_ms <= 0:
            raise ValueError("bucket width must be positive")
        end = self.end_ms if end_ms is None else end_ms
        n = int(end // width_ms) + 1
        counts = {k: np.zeros(n) for k in ("rps", "dtps", "ftps", "etps")}

        def put(name, t, c=1):
            i = int(t // width_ms)
            if i < n:
                counts[name][i] += c

        for t in self.arrivals:
            put("rps", t)
        for name, events in (("dtps", self.decode_tokens), ("ftps", self.finetune_tokens),
                             ("etps", self.evaluate_tokens)):
            for t, c in events:
                put(name, t, c)
        per_s = 1000.0 / width_ms
        rows = []
        for i in range(n):
            start = i * width_ms
            row = {"bucket_start_ms": start}
            row.update({k: float(v[i] * per_s) for k, v in counts.items()})
            row["slo_attainment_cum"] = self.attainment(start + width_ms)
            rows.append(row)
        return rows

    def to_json(self) -> str:
        return json.dumps({
            "arrivals": self.arrivals,
            "decode_tokens": self.decode_tokens,
            "finetune_tokens": self.finetune_tokens,
            "evaluate_tokens": self.evaluate_tokens,
            "completed": self.completed,
            "steps": self.steps,
            "verdicts": [asdict(v) for v in self.verdicts.values()],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsLedger":
        d = json.loads(text)
        led = cls()
        led.arrivals = d["arrivals"]
        led.decode_tokens = [tuple(x) for x in d["decode_tokens"]]
        led.finetune_tokens = [tuple(x) for x in d["finetune_tokens"]]
        led.evaluate_tokens = [tuple(x) for x in d["evaluate_tokens"]]
        led.completed = [tuple(x) for x in d["completed"]]
        led.steps = d["steps"]
        for v in d["verdicts"]:
            v["reasons"] = tuple(v["reasons"])
            led.verdicts[v["request_id"]] = Verdict(**v)
        return led


class Runtime:
    def __init__(
        self,
        base: BaseWeights | ModelLibrary,
        *,
        budget: int = 256,
        interleave: int = 4,
        slo: SloPolicy | None = None,
        mode: str = "unified",
        cost: CostModel | None = None,
        finetune_share: float = 0.5,
        clock: str = "virtual",
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if budget < 1 or interleave < 1:
            raise ValueError("budget and interleave must be >= 1")
        if not 0.0 <= finetune_share <= 1.0:
            raise ValueError("finetune_share must be in [0, 1]")
        if clock not in ("virtual", "wall"):
            raise ValueError(f"unknown clock {clock!r}")
        if isinstance(base, ModelLibrary):
            self.library = base
        else:
            self.library = ModelLibrary(base)
            self.library.create_virtual_model("default")
        self.base = self.library.base
        self.config = self.base.config
        self.budget = budget
        self.interleave = interleave
        self.slo = slo or SloPolicy()
        self.mode = mode
        self.cost = cost or CostModel()
        self.finetune_share = finetune_share
        self.clock = clock
        self.now = 0.0
        self.ledger = MetricsLedger()
        self.requests: dict[str, Request] = {}
        self.waiting: deque[Request] = deque()
        self.decoding: list[Request] = []
        self._inbox: deque[Request] = deque()
        self._lock = threading.Lock()
        self._since_backward = 0
        self._rr = 0
        self._in_step = False
        self._deferred: dict[str, str] = {}

    # admission -----------------------------------------------------------

    def admit(self, request: Request) -> Request:
        """Validate and queue a request (safe to call from other threads)."""
        r = request
        cfg = self.config
        if r.kind not in INFERENCE_KINDS + ("finetune",):
            raise ValueError(f"{r.request_id}: unknown request kind {r.kind!r}")
        if r.kind in INFERENCE_KINDS and self.mode == "finetune":
            raise ValueError(f"{r.request_id}: inference requests are not served in finetune mode")
        if r.kind == "finetune" and self.mode == "infer":
            raise ValueError(f"{r.request_id}: fine-tune requests are not accepted in infer mode")
        if r.adapter_id is not None and self.library.owner_of(r.adapter_id) is None:
            raise AdapterError(f"{r.request_id}: adapter {r.adapter_id!r} is not bound")
        if r.tokens.ndim != 1 or r.tokens.size < 1:
            raise ValueError(f"{r.request_id}: tokens must be a non-empty 1-D sequence")
        if r.tokens.min() < 0 or r.tokens.max() >= cfg.vocab_size:
            raise ValueError(f"{r.request_id}: token id outside vocabulary")
        if r.tokens.size > self.budget:
            raise ValueError(f"{r.request_id}: {r.tokens.size} rows can never fit budget {self.budget}")
        if r.kind == "prefill":
            if r.max_new_tokens < 1:
                raise ValueError(f"{r.request_id}: max_new_tokens must be >= 1")
            if r.tokens.size + r.max_new_tokens - 1 > cfg.max_seq:
                raise ValueError(f"{r.request_id}: prompt + generation exceeds max_seq={cfg.max_seq}")
        else:
            if r.tokens.size < 2 or r.labels is None or r.labels.shape != r.tokens.shape:
                raise ValueError(f"{r.request_id}: needs >= 2 tokens and matching labels")
        if r.dynamic_scale is not None:
            validate_dynamic_scale(r.dynamic_scale)
        with self._lock:
            if r.request_id in self.requests:
                raise ValueError(f"duplicate request id {r.request_id!r}")
            if r.arrival_ms is None:
                r.arrival_ms = self.now
            if r.kind == "finetune":
                st = self._trainer_for(r.adapter_id)
                st.queued.append((r.tokens[None, :], r.labels[None, :]))
                r.state = "delegated"
            else:
                self.ledger.arrivals.append(float(r.arrival_ms))
                owner = self.library.owner_of(r.adapter_id) if r.adapter_id is not None else None
                if owner is not None:
                    owner.in_flight[r.adapter_id] += 1
                self._inbox.append(r)
            self.requests[r.request_id] = r
        return r

    def _trainer_for(self, adapter_id):
        for st in self.library.trainers():
            if st.adapter_id == adapter_id and st.status != FINISHED:
                return st
        raise ValueError(f"no active trainer for adapter {adapter_id!r}")

    # trainers ------------------------------------------------------------

    def add_trainer(self, state: TrainerState) -> TrainerState:
        vm = self.library.owner_of(state.adapter_id)
        if vm is None:
            raise AdapterError(f"adapter {state.adapter_id!r} is not bound")
        if state.batch_size * state.seq_len > self.budget:
            raise ValueError(f"micro-batch of {state.batch_size * state.seq_len} rows exceeds budget {self.budget}")
        return vm.add_trainer(state)

    def trainer(self, job_id: str) -> TrainerState:
        st = self.library.trainer(job_id)
        if st is None:
            raise KeyError(f"unknown trainer {job_id!r}")
        return st

    def pause_trainer(self, job_id: str) -> None:
        """Pause at the next micro-step boundary (now, unless mid-step)."""
        st = self.trainer(job_id)
        if self._in_step:
            self._deferred[job_id] = PAUSED
        elif st.status == RUNNING:
            st.status = PAUSED

    def resume_trainer(self, job_id: str) -> None:
        st = self.trainer(job_id)
        if self._in_step:
            self._deferred[job_id] = RUNNING
        elif st.status == PAUSED:
            st.status = RUNNING

    # stepping ------------------------------------------------------------

    @property
    def has_inference(self) -> bool:
        return bool(self.waiting or self.decoding or self._inbox)

    def has_work(self) -> bool:
        if self.has_inference:
            return True
        return self.mode != "infer" and any(self._runnable())

    def _runnable(self) -> list[TrainerState]:
        return [st for st in self.library.trainers() if st.status == RUNNING and not st.exhausted]

    def _prefill_gate(self) -> int:
        """Most inference rows a step may carry while decodes are waiting on it.

        Beyond this the projected step time alone would break the max
        decoding latency of every running decode, so new prefills wait.
        """
        c = self.cost
        room = self.slo.max_decoding_ms - c.overhead_ms
        if room < 0:
            return 0
        if c.forward_row_ms <= 0:
            return self.budget
        return int(room // c.forward_row_ms)

    def step(self, now: float | None = None) -> StepReport:
        if now is not None:
            self.now = max(self.now, float(now))
        with self._lock:
            while self._inbox:
                self.waiting.append(self._inbox.popleft())
        t0 = self.now
        rep = StepReport(start_ms=t0)

        trainers = self._runnable() if self.mode != "infer" else []
        if trainers:
            k = self._rr % len(trainers)
            trainers = trainers[k:] + trainers[:k]
        train_step = not (self.waiting or self.decoding) or self._since_backward >= self.interleave - 1
        alloc = allocate_capacity(
            len(self.decoding),
            [r.tokens.size for r in self.waiting],
            [st.next_rows() for st in trainers] if train_step else [],
            self.budget, self.mode, self.finetune_share,
            self._prefill_gate() if self.decoding else None)
        rep.allocation = alloc

        decodes = self.decoding[: alloc.decode_slots]
        fresh = [self.waiting.popleft() for _ in range(alloc.n_prefills)]
        chosen = trainers[: alloc.n_micro]
        works = []
        for st in chosen:
            toks, labels = st.microbatch(self.config.vocab_size)
            works.append(Work(f"ft:{st.job_id}", Kind.FINETUNE, toks, st.adapter_id, labels,
                              accumulation=st.accumulation, dropout=st.dropout,
                              dropout_seed=(st.seed, st.micro_steps)))
        for r in fresh:
            r.first_scheduled_ms = t0
            if r.kind == "evaluate":
                works.append(Work(r.request_id, Kind.EVALUATE, r.tokens, r.adapter_id, r.labels,
                                  dynamic_scale=r.dynamic_scale))
            else:
                r.cache = KvCache(self.config)
                works.append(Work(r.request_id, Kind.PREFILL, r.tokens, r.adapter_id, cache=r.cache,
                                  dynamic_scale=r.dynamic_scale))
        for r in decodes:
            works.append(Work(r.request_id, Kind.DECODE, r.generated[-1], r.adapter_id, cache=r.cache,
                              dynamic_scale=r.dynamic_scale))
        if not works:
            return rep

        self._in_step = True
        try:
            wall0 = time.perf_counter()
            batch = assemble_batch(works, self.library.adapters(), self.config, self.budget)
            report = causal_lm_forward(self.base, batch, needs_grad=bool(chosen))
            if chosen:
                masks = {f"ft:{st.job_id}": [st.adapter_id] for st in chosen}
                grads = backward_finetune(self.base, report, masks)
                for st in chosen:
                    adapter = self.library.adapter(st.adapter_id)
                    rep.losses[st.job_id] = float(report.loss(f"ft:{st.job_id}").loss)
                    if st.accumulate(adapter, grads[st.adapter_id]):
                        rep.optimizer_steps.append(st.job_id)
                    st.consume(1)
                    if st.exhausted:
                        self._finish_trainer(st, adapter, rep)
                self._rr += 1
            wall = (time.perf_counter() - wall0) * 1000.0
        finally:
            self._in_step = False
            for job, status in self._deferred.items():
                st = self.trainer(job)
                if st.status in (RUNNING, PAUSED):
                    st.status = status
            self._deferred.clear()

        rep.finetune_rows = batch.n_finetune_rows
        rep.evaluate_rows = sum(batch.E)
        rep.prefill_rows = sum(batch.P)
        rep.decode_rows = batch.D
        rep.duration_ms = wall if self.clock == "wall" else self.cost.duration(batch.n_rows, rep.finetune_rows)
        end = t0 + rep.duration_ms
        self.now = end
        self._since_backward = 0 if chosen else self._since_backward + 1

        for r in fresh:
            if r.kind == "evaluate":
                r.loss = float(report.loss(r.request_id).loss)
                self._finish(r, end, rep)
            else:
                self._emit(r, greedy(report.next_token_logits(r.request_id)), end, rep)
                if r.state != "finished":
                    r.state = "decoding"
                    self.decoding.append(r)
        for r in decodes:
            self._emit(r, greedy(report.next_token_logits(r.request_id)), end, rep)
        self.decoding = [r for r in self.decoding if r.state != "finished"]
        self.ledger.record_step(rep)
        return rep

    def _finish_trainer(self, st: TrainerState, adapter, rep: StepReport) -> None:
        if st.flush(adapter):
            rep.optimizer_steps.append(st.job_id)
        st.status = FINISHED

    def _emit(self, r: Request, token: int, t: float, rep: StepReport) -> None:
        r.generated.append(token)
        r.token_ms.append(t)
        if r.first_token_ms is None:
            r.first_token_ms = t
        rep.emitted[r.request_id] = token
        if len(r.generated) >= r.max_new_tokens:
            self._finish(r, t, rep)

    def _finish(self, r: Request, t: float, rep: StepReport) -> None:
        r.state = "finished"
        r.finished_ms = t
        r.cache = None
        rep.finished.append(r.request_id)
        owner = self.library.owner_of(r.adapter_id) if r.adapter_id is not None else None
        if owner is not None:
            owner.in_flight[r.adapter_id] -= 1
        self.ledger.completed.append((t, r.request_id))
        if r.kind == "prefill":
            self.ledger.verdicts[r.request_id] = slo_verdict(r, self.slo)

    def finalize(self) -> None:
        """Give verdicts to inference requests that never finished."""
        for r in self.requests.values():
            if r.kind == "prefill" and r.request_id not in self.ledger.verdicts:
                self.ledger.verdicts[r.request_id] = slo_verdict(r, self.slo)

    def run_until_idle(self, max_steps: int = 1_000_000) -> list[StepReport]:
        reports = []
        for _ in range(max_steps):
            if not self.has_work():
                break
            reports.append(self.step())
        return reports

    def metrics_snapshot(self) -> MetricsLedger:
        with self._lock:
            return copy.deepcopy(self.ledger)
