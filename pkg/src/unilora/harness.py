"""Workload traces, run configuration, replay on the virtual clock, and the CLI.

Trace files are JSON lines, one :class:`TraceRecord` per line with exactly
the keys ``arrival_ms, kind, adapter_id, prompt_len, max_new_tokens,
label_len``.  Token content is synthesized from ``(seed, request index)``
so a trace only carries lengths and timing.

Every output file carries the run's config hash: CSVs as a leading
``# config_hash=...`` comment line, JSON files as a ``config_hash`` field.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .flow import IGNORE_ID
from .mixed_lora import LoraAdapter
from .model import TARGETS, BaseWeights, ModelConfig
from .runtime import MODES, CostModel, Request, Runtime, SloPolicy
from .training import PAUSED, RUNNING, TrainerState
from .virtual_module import VoidedAdapterBundle, unvoid_into, void_model

TRACE_KEYS = ("arrival_ms", "kind", "adapter_id", "prompt_len", "max_new_tokens", "label_len")
TRACE_KINDS = ("prefill", "evaluate", "finetune")
METRIC_COLUMNS = ("bucket_start_ms", "rps", "dtps", "ftps", "etps", "slo_attainment_cum")
# (rps, start s, duration s, requests); phase i routes to adapter i
MUTABLE_PHASES = ((1.0, 0, 120, 120), (2.5, 120, 60, 150), (2.0, 180, 120, 240), (1.0, 300, 120, 120))

EXIT_OK, EXIT_CONFIG, EXIT_TRACE = 0, 2, 3


class ConfigError(ValueError):
    pass


class TraceParseError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: int
    kind: str
    adapter_id: str | None
    prompt_len: int
    max_new_tokens: int
    label_len: int | None = None


# -- traces -----------------------------------------------------------------


def _check_record(rec: TraceRecord, where: str) -> None:
    if rec.kind not in TRACE_KINDS:
        raise TraceParseError(f"{where}: unknown kind {rec.kind!r}")
    for name in ("arrival_ms", "prompt_len", "max_new_tokens"):
        v = getattr(rec, name)
        if isinstance(v, bool) or not isinstance(v, int):
            raise TraceParseError(f"{where}: {name} must be an integer")
    if rec.arrival_ms < 0:
        raise TraceParseError(f"{where}: negative arrival_ms")
    if rec.prompt_len < 1 or rec.max_new_tokens < 1:
        raise TraceParseError(f"{where}: lengths must be >= 1")
    if rec.adapter_id is not None and not isinstance(rec.adapter_id, str):
        raise TraceParseError(f"{where}: adapter_id must be a string or null")
    if rec.kind != "prefill":
        if rec.label_len is None or isinstance(rec.label_len, bool) or not isinstance(rec.label_len, int):
            raise TraceParseError(f"{where}: {rec.kind} records need an integer label_len")
        if not 1 <= rec.label_len <= rec.prompt_len or rec.prompt_len < 2:
            raise TraceParseError(f"{where}: need 1 <= label_len <= prompt_len and prompt_len >= 2")


def dumps_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=False) + "\n" for r in records)


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    Path(path).write_text(dumps_trace(records), encoding="utf-8")


def parse_trace(text: str) -> list[TraceRecord]:
    """Parse JSON-lines trace text; errors name the offending line."""
    out: list[TraceRecord] = []
    last = -1
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        where = f"line {n}"
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict):
            raise TraceParseError(f"{where}: expected a JSON object")
        d.setdefault("label_len", None)
        if set(d) != set(TRACE_KEYS):
            raise TraceParseError(f"{where}: keys must be exactly {list(TRACE_KEYS)}, got {sorted(d)}")
        rec = TraceRecord(**d)
        _check_record(rec, where)
        if rec.arrival_ms < last:
            raise TraceParseError(f"{where}: arrival_ms decreases ({rec.arrival_ms} < {last})")
        last = rec.arrival_ms
        out.append(rec)
    return out


def parse_trace_csv(text: str) -> list[TraceRecord]:
    """Same records from CSV with the trace keys as header columns."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(reader.fieldnames) - set(TRACE_KEYS) or \
            set(TRACE_KEYS[:5]) - set(reader.fieldnames):
        raise TraceParseError(f"line 1: CSV header must be {list(TRACE_KEYS)}")
    lines = []
    for n, row in enumerate(reader, 2):
        try:
            d = {
                "arrival_ms": int(row["arrival_ms"]),
                "kind": row["kind"],
                "adapter_id": row["adapter_id"] or None,
                "prompt_len": int(row["prompt_len"]),
                "max_new_tokens": int(row["max_new_tokens"]),
                "label_len": int(row["label_len"]) if row.get("label_len") else None,
            }
        except (TypeError, ValueError) as exc:
            raise TraceParseError(f"line {n}: {exc}") from None
        lines.append((n, d))
    out, last = [], -1
    for n, d in lines:
        rec = TraceRecord(**d)
        _check_record(rec, f"line {n}")
        if rec.arrival_ms < last:
            raise TraceParseError(f"line {n}: arrival_ms decreases")
        last = rec.arrival_ms
        out.append(rec)
    return out


def load_trace(path: str | Path) -> list[TraceRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise TraceParseError(f"{path}: {exc}") from None
    return parse_trace_csv(text) if path.suffix.lower() == ".csv" else parse_trace(text)


def _parse_mix(mix: dict[str, float] | None) -> tuple[list[str | None], np.ndarray]:
    if not mix:
        return [None], np.ones(1)
    ids = list(mix)
    w = np.array([mix[k] for k in ids], dtype=np.float64)
    if not np.isfinite(w).all() or (w < 0).any() or w.sum() <= 0:
        raise ConfigError(f"invalid adapter mix {mix}")
    return ids, w / w.sum()


def _lengths(rng, span: tuple[int, int], n: int) -> np.ndarray:
    lo, hi = span
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid length range {span}")
    return rng.integers(lo, hi + 1, size=n)


def generate_workload(
    rps: float,
    n: int,
    mix: dict[str, float] | None = None,
    seed: int = 0,
    prompt_len: tuple[int, int] = (8, 32),
    max_new_tokens: tuple[int, int] = (16, 64),
    kind: str = "prefill",
) -> list[TraceRecord]:
    """``n`` requests with Poisson arrivals at ``rps`` and adapters drawn from ``mix``."""
    if not (rps > 0 and np.isfinite(rps)):
        raise ConfigError("rps must be positive")
    if n < 0:
        raise ConfigError("request count must be >= 0")
    ids, p = _parse_mix(mix)
    rng = np.random.default_rng(seed)
    arrivals = np.rint(np.cumsum(rng.exponential(1000.0 / rps, size=n))).astype(np.int64)
    choice = rng.choice(len(ids), size=n, p=p)
    plen = _lengths(rng, prompt_len, n)
    mnew = _lengths(rng, max_new_tokens, n)
    label = None if kind == "prefill" else 1
    return [TraceRecord(int(arrivals[i]), kind, ids[choice[i]], int(plen[i]), int(mnew[i]),
                        None if label is None else int(plen[i]))
            for i in range(n)]


def generate_phased(
    phases: Sequence[tuple[float, float, float, int]] = MUTABLE_PHASES,
    adapters: Sequence[str | None] | None = None,
    seed: int = 0,
    prompt_len: tuple[int, int] = (8, 32),
    max_new_tokens: tuple[int, int] = (16, 64),
) -> list[TraceRecord]:
    """Piecewise-constant-rate trace: per phase ``(rps, start_s, duration_s, n)``.

    Arrivals within a phase are a Poisson process conditioned on its request
    count (sorted uniform times).  Phase ``i`` uses ``adapters[i]``.
    """
    rng = np.random.default_rng(seed)
    adapters = list(adapters) if adapters is not None else [f"lora{i}" for i in range(len(phases))]
    if len(adapters) != len(phases):
        raise ConfigError("need one adapter per phase")
    out = []
    for (rps, start, dur, n), aid in zip(phases, adapters):
        if rps <= 0 or dur <= 0 or n < 0:
            raise ConfigError(f"invalid phase {(rps, start, dur, n)}")
        t = np.sort(np.floor(rng.uniform(start * 1000.0, (start + dur) * 1000.0, size=n))).astype(np.int64)
        plen = _lengths(rng, prompt_len, n)
        mnew = _lengths(rng, max_new_tokens, n)
        out += [TraceRecord(int(t[i]), "prefill", aid, int(plen[i]), int(mnew[i])) for i in range(n)]
    out.sort(key=lambda r: r.arrival_ms)
    return out


def synth_request(rec: TraceRecord, index: int, seed: int, vocab: int) -> Request:
    rng = np.random.default_rng([seed, index])
    toks = rng.integers(vocab, size=rec.prompt_len)
    labels = None
    if rec.kind != "prefill":
        labels = toks.copy()
        labels[: rec.prompt_len - rec.label_len] = IGNORE_ID
    return Request(f"req{index:06d}", rec.kind, toks, rec.adapter_id, labels,
                   max_new_tokens=rec.max_new_tokens, arrival_ms=float(rec.arrival_ms))


# -- configuration ------------------------------------------------------------


def _default_adapters():
    return [{"id": f"lora{i}", "rank": 8, "alpha": 16.0, "seed": 100 + i, "b_std": 0.02} for i in range(4)]


@dataclass
class RunConfig:
    model: Any = field(default_factory=dict)
    base_seed: int = 0
    adapters: list = field(default_factory=_default_adapters)
    trainers: list = field(default_factory=list)
    slo: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    budget: int = 256
    interleave: int = 4
    finetune_share: float = 0.5
    mode: str = "unified"
    clock: str = "virtual"
    seed: int = 0
    rps: float = 1.0
    requests: int = 100
    mix: dict = field(default_factory=dict)
    prompt_len: list = field(default_factory=lambda: [8, 32])
    max_new_tokens: list = field(default_factory=lambda: [16, 64])
    phases: Any = None
    duration_ms: float | None = None
    max_steps: int = 1_000_000
    bucket_ms: float = 1000.0
    steps: int = 20
    steps_after: int = 20

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(**d)
        if isinstance(cfg.model, str):
            p = Path(cfg.model)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            try:
                cfg.model = json.loads(p.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"model config {p}: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.model_config()
            self.slo_policy()
            self.cost_model()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.clock not in ("virtual", "wall"):
            raise ConfigError("clock must be virtual or wall")
        if self.budget < 1 or self.interleave < 1:
            raise ConfigError("budget and interleave must be >= 1")
        if not 0 <= self.finetune_share <= 1:
            raise ConfigError("finetune_share must be in [0, 1]")
        if not self.rps > 0 or self.requests < 0 or self.bucket_ms <= 0:
            raise ConfigError("need rps > 0, requests >= 0 and bucket_ms > 0")
        ids = [a.get("id") for a in self.adapters]
        if len(set(ids)) != len(ids) or None in ids:
            raise ConfigError("adapter ids must be present and unique")
        for t in self.trainers:
            if t.get("adapter_id") not in ids:
                raise ConfigError(f"trainer {t.get('job_id')} references unknown adapter")
        if self.mix and set(self.mix) - set(ids):
            raise ConfigError(f"mix references unknown adapters {sorted(set(self.mix) - set(ids))}")
        for span in (self.prompt_len, self.max_new_tokens):
            if len(span) != 2 or span[0] < 1 or span[1] < span[0]:
                raise ConfigError(f"invalid length range {span}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def slo_policy(self) -> SloPolicy:
        return SloPolicy(**self.slo)

    def cost_model(self) -> CostModel:
        return CostModel(**self.cost)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_runtime(cfg: RunConfig, mode: str | None = None) -> Runtime:
    """Fresh runtime with the configured base, adapters and trainers."""
    mc = cfg.model_config()
    base = BaseWeights.random(mc, cfg.base_seed)
    rt = Runtime(base, budget=cfg.budget, interleave=cfg.interleave, slo=cfg.slo_policy(),
                 mode=mode or cfg.mode, cost=cfg.cost_model(), finetune_share=cfg.finetune_share,
                 clock=cfg.clock)
    vm = rt.library.get("default")
    for a in cfg.adapters:
        ad = LoraAdapter.init(mc, a["id"], rank=a.get("rank", 8), alpha=a.get("alpha", 16.0),
                              targets=a.get("targets", TARGETS), seed=a.get("seed", 0),
                              std=a.get("std", 0.02), b_std=a.get("b_std", 0.0))
        vm.attach_adapter(ad)
    for t in cfg.trainers:
        t = dict(t)
        try:
            rt.add_trainer(TrainerState(**t))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trainer {t.get('job_id')}: {exc}") from None
    return rt


# -- replay & reports -----------------------------------------------------------


@dataclass
class RunResult:
    runtime: Runtime
    config: RunConfig
    steps: int


def replay(records: Sequence[TraceRecord], cfg: RunConfig, runtime: Runtime | None = None) -> RunResult:
    """Drive a runtime over ``records`` on its clock, honoring ``arrival_ms``.

    Records of kinds the run mode does not serve are skipped.  The run ends
    once every request is admitted and inference is drained, or at
    ``duration_ms`` if trainers are still busy.
    """
    rt = runtime or build_runtime(cfg)
    vocab = rt.config.vocab_size
    serve = {"infer": ("prefill", "evaluate"), "finetune": ("finetune",)}.get(rt.mode, TRACE_KINDS)
    pending = [(i, r) for i, r in enumerate(records) if r.kind in serve]
    end_ms = cfg.duration_ms
    if end_ms is None:
        end_ms = float(records[-1].arrival_ms) if records else 0.0
    i = steps = 0
    while steps < cfg.max_steps:
        while i < len(pending) and pending[i][1].arrival_ms <= rt.now:
            idx, rec = pending[i]
            try:
                rt.admit(synth_request(rec, idx, cfg.seed, vocab))
            except ValueError as exc:
                raise ConfigError(f"trace record {idx}: {exc}") from None
            i += 1
        if rt.has_inference or (i < len(pending) and rt.has_work()) or (rt.has_work() and rt.now < end_ms):
            rt.step()
            steps += 1
        elif i < len(pending):
            rt.now = float(pending[i][1].arrival_ms)
        else:
            break
    rt.finalize()
    return RunResult(rt, cfg, steps)


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def metrics_csv(ledger, width_ms: float = 1000.0, config_hash: str = "") -> str:
    rows = ledger.buckets(width_ms)
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r["bucket_start_ms"])] + [_fmt(r[k]) for k in METRIC_COLUMNS[1:]])
    totals = {k: sum(r[k] for r in rows) for k in METRIC_COLUMNS[1:5]}
    w.writerow(["total"] + [_fmt(totals[k]) for k in METRIC_COLUMNS[1:5]] + [_fmt(ledger.attainment())])
    return buf.getvalue()


def verdicts_csv(runtime: Runtime, config_hash: str = "") -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["request_id", "adapter_id", "arrival_ms", "wait_ms", "mean_gap_ms", "max_gap_ms",
                "tokens", "attained", "reasons"])
    for rid in sorted(runtime.ledger.verdicts):
        v = runtime.ledger.verdicts[rid]
        r = runtime.requests[rid]
        w.writerow([rid, r.adapter_id or "", _fmt(r.arrival_ms), "" if v.wait_ms is None else _fmt(v.wait_ms),
                    _fmt(v.mean_gap_ms), _fmt(v.max_gap_ms), v.tokens, int(v.attained), ";".join(v.reasons)])
    return buf.getvalue()


def summary(result: RunResult) -> dict:
    rt = result.runtime
    led = rt.ledger
    return {
        "config_hash": result.config.hash(),
        "config": result.config.to_dict(),
        "totals": {
            "requests": len(led.arrivals),
            "finished": sum(1 for v in led.verdicts.values() if v.finished_ms is not None),
            "attained": sum(1 for v in led.verdicts.values() if v.attained),
            "slo_attainment": led.attainment(),
            "decode_tokens": sum(c for _, c in led.decode_tokens),
            "finetune_tokens": sum(c for _, c in led.finetune_tokens),
            "evaluate_tokens": sum(c for _, c in led.evaluate_tokens),
            "optimizer_steps": {st.job_id: st.optimizer_steps for st in rt.library.trainers()},
            "steps": result.steps,
            "end_ms": rt.now,
        },
    }


def write_outputs(result: RunResult, out: str | Path) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    h = result.config.hash()
    led = result.runtime.ledger
    ledger_doc = json.loads(led.to_json())
    ledger_doc["config_hash"] = h
    paths = {
        "metrics": out / "metrics.csv",
        "verdicts": out / "verdicts.csv",
        "summary": out / "summary.json",
        "ledger": out / "ledger.json",
    }
    paths["metrics"].write_text(metrics_csv(led, result.config.bucket_ms, h))
    paths["verdicts"].write_text(verdicts_csv(result.runtime, h))
    paths["summary"].write_text(json.dumps(summary(result), sort_keys=True, indent=1) + "\n")
    paths["ledger"].write_text(json.dumps(ledger_doc, sort_keys=True) + "\n")
    return paths


def report(ledger_path: str | Path, width_ms: float = 1000.0) -> str:
    """Metrics CSV recomputed from a saved ledger."""
    from .runtime import MetricsLedger

    doc = json.loads(Path(ledger_path).read_text())
    h = doc.pop("config_hash", "")
    return metrics_csv(MetricsLedger.from_json(json.dumps(doc)), width_ms, h)


# -- training & migration drivers ---------------------------------------------


def train_steps(rt: Runtime, n: int) -> list:
    reps = []
    for _ in range(n):
        if not rt.has_work():
            break
        reps.append(rt.step())
    return reps


def adapter_digest(rt: Runtime) -> dict[str, str]:
    return {aid: ad.content_hash() for aid, ad in sorted(rt.library.adapters().items())}


def migrate(cfg: RunConfig, bundle_path: str | Path, verify: bool = False) -> dict:
    """Train ``cfg.steps`` in one runtime, void to a file, continue
    ``cfg.steps_after`` in a fresh runtime; optionally compare with an
    uninterrupted run of the same total length."""
    if not cfg.trainers:
        raise ConfigError("migrate needs at least one trainer")
    a = build_runtime(cfg, mode="finetune")
    train_steps(a, cfg.steps)
    for st in a.library.trainers():
        if st.status == RUNNING:
            a.pause_trainer(st.job_id)
    bundle = void_model(a.library.get("default"))
    bundle.save(bundle_path)

    b = build_runtime(replace_trainers(cfg), mode="finetune")
    vm = b.library.get("default")
    for aid in list(vm.adapters):
        vm.detach_adapter(aid)
    unvoid_into(VoidedAdapterBundle.load(bundle_path), vm)
    for st in b.library.trainers():
        if st.status == PAUSED:
            b.resume_trainer(st.job_id)
    train_steps(b, cfg.steps_after)
    out = {"bundle_bytes": Path(bundle_path).stat().st_size, "adapters": adapter_digest(b)}
    if verify:
        c = build_runtime(cfg, mode="finetune")
        train_steps(c, cfg.steps + cfg.steps_after)
        out["uninterrupted"] = adapter_digest(c)
        out["match"] = out["uninterrupted"] == out["adapters"]
    return out


def replace_trainers(cfg: RunConfig) -> RunConfig:
    d = cfg.to_dict()
    d["trainers"] = []
    return RunConfig(**d)


# -- CLI ----------------------------------------------------------------------


def _span(text: str) -> list[int]:
    lo, _, hi = text.partition(":")
    return [int(lo), int(hi or lo)]


def _mix(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        k, _, w = part.partition(":")
        out[k] = float(w or 1.0)
    return out


def _phases(text: str) -> list[list[float]]:
    if text == "mutable":
        return [list(p) for p in MUTABLE_PHASES]
    return [[float(x) for x in p.split(":")] for p in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unilora", description="Unified LoRA fine-tuning and serving runtime.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path)
    common.add_argument("--trace", type=Path)
    common.add_argument("--rps", type=float)
    common.add_argument("--requests", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--budget", type=int)
    common.add_argument("--interleave", type=int)
    common.add_argument("--slo-wait", type=float, help="max waiting time, seconds")
    common.add_argument("--slo-mean-ms", type=float)
    common.add_argument("--slo-max-ms", type=float)
    common.add_argument("--out", type=Path)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--mix", type=_mix, help="adapter weights, e.g. lora0:1,lora1:3")
    common.add_argument("--prompt-len", type=_span, help="lo:hi")
    common.add_argument("--max-new-tokens", type=_span, help="lo:hi")
    common.add_argument("--phases", type=_phases, help="'mutable' or rps:start_s:dur_s:n,...")
    common.add_argument("--bucket-ms", type=float)
    common.add_argument("--steps", type=int)
    common.add_argument("--steps-after", type=int)
    common.add_argument("--clock", choices=("virtual", "wall"))
    for name, text in (("gen", "write a synthetic trace"), ("replay", "replay a trace"),
                       ("train", "fine-tune only"), ("serve", "generate a workload and serve it"),
                       ("migrate", "void/unvoid a training job across runtimes"),
                       ("report", "metrics CSV from a saved ledger")):
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "migrate":
            sp.add_argument("--bundle", type=Path)
            sp.add_argument("--verify", action="store_true")
        if name == "report":
            sp.add_argument("--ledger", type=Path)
    return p


def load_config(args) -> RunConfig:
    d: dict[str, Any] = {}
    base_dir = None
    if args.config is not None:
        try:
            d = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        base_dir = args.config.parent
    flags = {"rps": args.rps, "requests": args.requests, "seed": args.seed, "budget": args.budget,
             "interleave": args.interleave, "mode": args.mode, "mix": args.mix,
             "prompt_len": args.prompt_len, "max_new_tokens": args.max_new_tokens,
             "phases": args.phases, "bucket_ms": args.bucket_ms, "steps": args.steps,
             "steps_after": args.steps_after, "clock": args.clock}
    d.update({k: v for k, v in flags.items() if v is not None})
    slo = dict(d.get("slo", {}))
    for flag, key in (("slo_wait", "max_waiting_s"), ("slo_mean_ms", "mean_decoding_ms"),
                      ("slo_max_ms", "max_decoding_ms")):
        if getattr(args, flag) is not None:
            slo[key] = getattr(args, flag)
    d["slo"] = slo
    try:
        return RunConfig.from_dict(d, base_dir)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def workload(cfg: RunConfig) -> list[TraceRecord]:
    if cfg.phases:
        ids = [a["id"] for a in cfg.adapters][: len(cfg.phases)]
        phases = [tuple(p) if len(p) == 4 else (*p, int(round(p[0] * p[2]))) for p in cfg.phases]
        return generate_phased(phases, ids, cfg.seed,
                               tuple(cfg.prompt_len), tuple(cfg.max_new_tokens))
    return generate_workload(cfg.rps, cfg.requests, cfg.mix or None, cfg.seed,
                             tuple(cfg.prompt_len), tuple(cfg.max_new_tokens))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = args.out
        if args.command == "gen":
            text = dumps_trace(workload(cfg))
            target = args.trace or out
            if target is None:
                sys.stdout.write(text)
            else:
                Path(target).write_text(text, encoding="utf-8")
            return EXIT_OK
        if args.command in ("replay", "serve"):
            if args.command == "replay":
                if args.trace is None:
                    raise ConfigError("replay needs --trace")
                records = load_trace(args.trace)
            else:
                records = workload(cfg)
            result = replay(records, cfg)
            paths = write_outputs(result, out or Path("run_out"))
            print(json.dumps(summary(result)["totals"], sort_keys=True))
            print(f"wrote {', '.join(str(p) for p in paths.values())}")
            return EXIT_OK
        if args.command == "train":
            if not cfg.trainers:
                raise ConfigError("train needs trainers in the config")
            rt = build_runtime(cfg, mode="finetune")
            reps = train_steps(rt, cfg.steps)
            out = Path(out or "train_out")
            out.mkdir(parents=True, exist_ok=True)
            lines = [f"# config_hash={cfg.hash()}", "step,job_id,loss"]
            lines += [f"{i},{job},{_fmt(loss)}" for i, r in enumerate(reps) for job, loss in sorted(r.losses.items())]
            (out / "losses.csv").write_text("\n".join(lines) + "\n")
            from . import container

            tensors = {f"{aid}/{name}": arr for aid, ad in sorted(rt.library.adapters().items())
                       for name, arr in ad.params().items()}
            container.save(out / "adapters.ulw", tensors, {"kind": "adapters", "config_hash": cfg.hash()})
            print(json.dumps({"steps": len(reps), "adapters": adapter_digest(rt)}, sort_keys=True))
            return EXIT_OK
        if args.command == "migrate":
            out = Path(out or "migrate_out")
            out.mkdir(parents=True, exist_ok=True)
            res = migrate(cfg, args.bundle or out / "bundle.ulw", args.verify)
            res["config_hash"] = cfg.hash()
            (out / "migrate.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
            print(json.dumps(res, sort_keys=True))
            return EXIT_OK if res.get("match", True) else 1
        if args.command == "report":
            ledger = args.ledger or (out / "ledger.json" if out else None)
            if ledger is None:
                raise ConfigError("report needs --ledger or --out")
            try:
                text = report(ledger, cfg.bucket_ms)
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"{ledger}: {exc}") from None
            sys.stdout.write(text)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceParseError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
