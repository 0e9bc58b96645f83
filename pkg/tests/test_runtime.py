import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, make_adapter
from unilora.harness import generate_workload
from unilora.mixed_lora import AdapterError
from unilora.model import forward_full
from unilora.runtime import (
    CostModel,
    MetricsLedger,
    Request,
    Runtime,
    SloPolicy,
    allocate_capacity,
    slo_verdict,
)
from unilora.tensor import cross_entropy_shifted
from unilora.training import PAUSED, RUNNING, TrainerState


def make_runtime(base, mode="unified", adapters=("a", "b"), trainer=None, **kw):
    rt = Runtime(base, mode=mode, **kw)
    vm = rt.library.get("default")
    for i, aid in enumerate(adapters):
        vm.attach_adapter(make_adapter(TINY, aid, rank=2, seed=i + 1, b_std=0.05))
    if trainer:
        rt.add_trainer(trainer)
    return rt


def prefill(rid, toks, aid=None, n=3, t=None):
    return Request(rid, "prefill", toks, aid, max_new_tokens=n, arrival_ms=t)


def snapshot(rt):
    out = {}
    for aid, ad in rt.library.adapters().items():
        out[aid] = {k: v.copy() for k, v in ad.params().items()}
    for s in rt.library.trainers():
        out["opt/" + s.job_id] = {k: v.copy() for k, v in s.tensors().items()}
    return out


def same(a, b):
    return a.keys() == b.keys() and all(
        a[k].keys() == b[k].keys() and all(np.array_equal(a[k][n], b[k][n]) for n in a[k]) for k in a)


# allocation -----------------------------------------------------------------

alloc_args = st.tuples(
    st.integers(0, 300),
    st.lists(st.integers(1, 64), max_size=8),
    st.lists(st.integers(1, 128), max_size=4),
    st.integers(1, 256),
    st.sampled_from(["infer", "finetune", "unified", "mutable"]),
)


@settings(max_examples=300, deadline=None)
@given(alloc_args, st.integers(0, 50))
def test_allocation_conserves_budget_and_concedes(args, extra):
    d, pre, ft, budget, mode = args
    a = allocate_capacity(d, pre, ft, budget, mode)
    assert a.total <= budget
    if mode != "finetune":
        assert a.decode_slots == min(d, budget)
    assert a.n_prefills <= len(pre) and a.prefill_rows == sum(pre[: a.n_prefills])
    assert a.finetune_rows == sum(ft[: a.n_micro])
    # more pending inference never buys fine-tuning more rows
    assert allocate_capacity(d + extra, pre, ft, budget, mode).finetune_rows <= a.finetune_rows
    assert allocate_capacity(d, pre + [extra + 1], ft, budget, mode).finetune_rows <= a.finetune_rows
    # the latency gate defers prefills only
    gated = allocate_capacity(d, pre, ft, budget, mode, row_cap=extra)
    assert gated.finetune_rows == a.finetune_rows and gated.prefill_rows <= a.prefill_rows


def test_allocation_edges():
    a = allocate_capacity(0, [], [64, 64, 64], 128)
    assert a.finetune_rows == 128 and a.n_micro == 2
    assert allocate_capacity(128, [], [8], 128).finetune_rows == 0
    assert allocate_capacity(300, [4], [8], 128).decode_slots == 128
    u = allocate_capacity(0, [100], [32, 32], 128, "unified", 0.5)
    assert u.prefill_rows == 0 and u.finetune_rows == 64
    assert allocate_capacity(5, [3], [8], 16, "infer").finetune_rows == 0
    f = allocate_capacity(5, [3], [8], 16, "finetune")
    assert f.decode_slots == 0 and f.finetune_rows == 8
    with pytest.raises(ValueError):
        allocate_capacity(0, [], [], 0)


# admission ------------------------------------------------------------------

def test_admission_guards(base):
    rt = make_runtime(base, mode="infer")
    r = rt.admit(prefill("r1", [1, 2, 3]))
    assert r.arrival_ms == 0.0
    rt.step()
    assert r.first_scheduled_ms == 0.0 and len(r.generated) == 1
    bad = [
        prefill("x", [1, 2], "zz"),
        prefill("x", []),
        prefill("x", [1, 99]),
        prefill("x", [1], n=0),
        prefill("x", [1] * 10, n=TINY.max_seq - 8),
        Request("x", "evaluate", [1, 2], None),
        Request("x", "decode", [1, 2], None),
        Request("x", "finetune", [1, 2], "a", labels=[1, 2]),
        Request("x", "prefill", [1, 2], "a", dynamic_scale=0.0),
    ]
    for req in bad:
        with pytest.raises((ValueError, AdapterError)):
            rt.admit(req)
    with pytest.raises(ValueError, match="duplicate"):
        rt.admit(prefill("r1", [1]))
    with pytest.raises(ValueError):
        make_runtime(base, mode="finetune").admit(prefill("p", [1]))
    with pytest.raises(ValueError):
        make_runtime(base, budget=4).admit(prefill("p", [1] * 5))


def test_admit_from_threads(base):
    rt = make_runtime(base, mode="infer")
    threads = [threading.Thread(target=lambda i=i: rt.admit(prefill(f"r{i}", [1, 2], n=1))) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    rt.run_until_idle()
    assert len(rt.metrics_snapshot().verdicts) == 20


# stepping -------------------------------------------------------------------

def test_empty_step(base):
    rep = make_runtime(base).step()
    assert rep.rows == 0 and rep.duration_ms == 0.0


def test_prefill_decode_tokens_match_greedy_solo(base):
    rt = make_runtime(base, mode="infer")
    toks = [5, 3, 8]
    r = rt.admit(prefill("r", toks, "a", n=4))
    rt.run_until_idle()
    ad = rt.library.adapter("a")
    seq = list(toks)
    for _ in range(4):
        seq.append(int(np.argmax(forward_full(base, seq, ad)[-1])))
    assert r.generated == seq[3:] and r.state == "finished"
    assert len(r.token_ms) == 4 and r.first_token_ms == r.token_ms[0]
    assert rt.library.get("default").in_flight["a"] == 0


def test_evaluate_request(base):
    rt = make_runtime(base, mode="infer")
    toks = np.array([4, 5, 6, 7])
    r = rt.admit(Request("e", "evaluate", toks, "b", labels=toks))
    rep = rt.step()
    want = cross_entropy_shifted(forward_full(base, toks, rt.library.adapter("b")), toks)[0]
    assert abs(r.loss - want) < 1e-12 and r.state == "finished"
    assert rep.evaluate_rows == 4 and not rt.has_work()
    assert rt.ledger.buckets(1000.0)[0]["etps"] == 4.0
    assert "e" not in rt.ledger.verdicts


def test_inference_only_keeps_ftps_zero_and_adapters_pure(base):
    rt = make_runtime(base, trainer=TrainerState("j", "a", seq_len=4, batch_size=1))
    rt.pause_trainer("j")
    before = snapshot(rt)
    for i in range(6):
        rt.admit(prefill(f"r{i}", [i + 1, 2, 3], "ab"[i % 2], t=float(i)))
    rt.run_until_idle()
    rows = rt.ledger.buckets(1000.0)
    assert sum(r["ftps"] for r in rows) == 0 and sum(r["dtps"] for r in rows) == 18
    assert same(before, snapshot(rt))


def test_ledger_decode_tokens_match_requests(base):
    rt = make_runtime(base, mode="infer")
    rng = np.random.default_rng(0)
    for i in range(15):
        rt.admit(prefill(f"r{i}", rng.integers(32, size=3), n=int(rng.integers(1, 6)), t=i * 37.0))
        rt.step(now=i * 37.0)
    rt.run_until_idle()
    total = sum(len(r.generated) for r in rt.requests.values())
    assert sum(c for _, c in rt.ledger.decode_tokens) == total
    assert sum(r["dtps"] for r in rt.ledger.buckets(250.0)) * 0.25 == total


def test_unified_trajectory_equals_finetune_only(base):
    def trainer():
        return TrainerState("j", "a", seq_len=6, batch_size=2, accumulation=2, lr=1e-2, epochs=None)

    rt = make_runtime(base, trainer=trainer(), interleave=2)
    for i in range(8):
        rt.admit(prefill(f"r{i}", [i + 1, 4, 2], "b" if i % 2 else "a", n=3, t=0.0))
    trained = sum(bool(rt.step().finetune_rows) for _ in range(30))
    assert 0 < trained < 30
    solo = make_runtime(base, mode="finetune", trainer=trainer())
    for _ in range(trained):
        solo.step()
    assert rt.trainer("j").record() == solo.trainer("j").record()
    assert same({"a": rt.library.adapter("a").params()}, {"a": solo.library.adapter("a").params()})


def test_interleave_gates_backward(base):
    rt = make_runtime(base, trainer=TrainerState("j", "a", seq_len=4, batch_size=1, epochs=None), interleave=3)
    rt.admit(prefill("r", [1, 2], n=12))
    flags = [bool(rt.step().finetune_rows) for _ in range(9)]
    assert flags == [False, False, True] * 3
    rt.run_until_idle(max_steps=3)
    assert all(rt.step().finetune_rows for _ in range(3))  # no inference left


def test_trainer_finishes_and_flushes(base):
    st_ = TrainerState("j", "a", seq_len=4, batch_size=2, accumulation=4, dataset_size=6, epochs=1)
    rt = make_runtime(base, mode="finetune", trainer=st_)
    reps = rt.run_until_idle()
    assert len(reps) == 3 and st_.status == "finished" and st_.optimizer_steps == 1
    assert reps[-1].optimizer_steps == ["j"]


def test_finetune_requests_feed_trainer(base):
    st_ = TrainerState("j", "a", seq_len=4, batch_size=1, accumulation=1, epochs=0)
    rt = make_runtime(base, trainer=st_)
    assert not rt.has_work()
    r = rt.admit(Request("f", "finetune", [1, 2, 3, 4, 5], "a", labels=[1, 2, 3, 4, 5]))
    assert r.state == "delegated" and rt.has_work()
    rep = rt.step()
    assert rep.finetune_rows == 5 and rep.optimizer_steps == ["j"]


def test_pause_resume(base):
    def run(pause_at):
        st_ = TrainerState("j", "a", seq_len=4, batch_size=1, accumulation=2, epochs=None, dropout=0.1)
        rt = make_runtime(base, mode="finetune", trainer=st_)
        for i in range(6):
            if i == pause_at:
                rt.pause_trainer("j")
                assert rt.step().rows == 0 and st_.status == PAUSED
                rt.resume_trainer("j")
            rt.step()
        return rt

    ref = run(None)
    for k in range(6):
        assert same(snapshot(run(k)), snapshot(ref))


def test_pause_mid_step_is_deferred(base):
    st_ = TrainerState("j", "a", seq_len=4, batch_size=1, epochs=None)
    rt = make_runtime(base, mode="finetune", trainer=st_)
    orig = rt.library.adapters
    seen = []

    def adapters_then_pause():  # runs inside step, before the forward
        rt.pause_trainer("j")
        seen.append(st_.status)
        return orig()

    rt.library.adapters = adapters_then_pause
    rep = rt.step()
    assert seen == [RUNNING]
    assert rep.finetune_rows == 4 and st_.status == PAUSED and st_.micro_steps == 1


def test_prefill_gate_defers_behind_decodes(base):
    cost = CostModel(overhead_ms=500.0, forward_row_ms=50.0, backward_row_ms=0.0)
    rt = make_runtime(base, mode="infer", cost=cost)  # gate: (1000 - 500) / 50 = 10 rows
    rt.admit(prefill("d", [1, 2], n=3))
    rt.step()
    late = rt.admit(prefill("p", list(range(12)), n=1))
    rep = rt.step()
    assert rep.decode_rows == 1 and rep.prefill_rows == 0
    rt.run_until_idle()
    assert late.first_scheduled_ms > rt.requests["d"].finished_ms - 1e-9
    assert rt.ledger.verdicts["d"].max_gap_ms <= 1000.0  # the clause the gate protects


def test_determinism(base):
    def run():
        rt = make_runtime(base, trainer=TrainerState("j", "a", seq_len=4, batch_size=2, epochs=None, dropout=0.05))
        for i in range(10):
            rt.admit(prefill(f"r{i}", [i % 32, 3, 1], "ab"[i % 2], n=2, t=i * 20.0))
            rt.step(now=i * 20.0)
        rt.run_until_idle(max_steps=20)
        rt.finalize()
        return rt.ledger.to_json(), snapshot(rt)

    (j1, s1), (j2, s2) = run(), run()
    assert j1 == j2 and same(s1, s2)
    assert MetricsLedger.from_json(j1).to_json() == j1


def test_800_poisson_admissions_counted(base):
    rt = make_runtime(base, mode="infer", adapters=())
    trace = generate_workload(rps=1.0, n=800, seed=3, prompt_len=(2, 6), max_new_tokens=(1, 3))
    for i, rec in enumerate(trace):
        rt.admit(prefill(f"r{i}", [i % 32] * rec.prompt_len, n=rec.max_new_tokens, t=rec.arrival_ms))
        while rt.has_inference and rt.now < rec.arrival_ms:
            rt.step()
        rt.now = max(rt.now, rec.arrival_ms)
    rt.run_until_idle()
    led = rt.metrics_snapshot()
    assert len(led.arrivals) == 800 and len(led.verdicts) == 800
    assert sum(r["rps"] for r in led.buckets(1000.0)) == 800
    assert led.attainment() == 1.0


# SLO verdicts ---------------------------------------------------------------

def test_slo_policy_paper_defaults_and_validation():
    p = SloPolicy()
    assert (p.max_waiting_s, p.mean_decoding_ms, p.max_decoding_ms) == (6.0, 200.0, 1000.0)
    for bad in ({"max_waiting_s": 0}, {"mean_decoding_ms": -1}, {"max_decoding_ms": float("inf")}):
        with pytest.raises(ValueError):
            SloPolicy(**bad)


def _done(wait, gaps):
    r = Request("r", "prefill", [1], arrival_ms=0.0)
    r.first_scheduled_ms = wait
    r.token_ms = list(np.cumsum([wait] + list(gaps)))
    r.generated = [0] * len(r.token_ms)
    r.finished_ms = r.token_ms[-1]
    return r


def test_slo_verdict_clauses():
    p = SloPolicy()
    assert slo_verdict(_done(0.0, [0.0, 0.0]), p).attained
    assert slo_verdict(_done(6000.0, [200.0, 200.0]), p).attained
    v = slo_verdict(_done(6001.0, []), p)
    assert not v.attained and v.reasons == ("waiting",)
    assert slo_verdict(_done(0.0, [150.0, 260.0]), p).reasons == ("mean_decoding_latency",)
    assert slo_verdict(_done(0.0, [1001.0] + [10.0] * 9), p).reasons == ("max_decoding_latency",)
    open_ = Request("r", "prefill", [1], arrival_ms=0.0)
    assert slo_verdict(open_, p).reasons == ("unfinished",)
