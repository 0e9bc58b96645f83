"""
Fine-tuning yields to a traffic ramp
====================================

Four phases of arrivals (1, 2.5, 2 and 1 requests per second over 120, 60,
120 and 120 s) hit a runtime that is also training.  Fine-tune throughput
drops while the rate is high and climbs back once it falls.  Everything runs
on the virtual clock, so this takes under a minute.
"""

import numpy as np

from unilora.harness import MUTABLE_PHASES, RunConfig, generate_phased, replay

cfg = RunConfig.from_dict({
    "model": {"vocab_size": 64, "hidden": 32, "n_layers": 2, "n_heads": 4, "mlp_hidden": 64, "max_seq": 128},
    "adapters": [{"id": f"lora{i}", "rank": 8, "alpha": 16, "seed": i, "b_std": 0.02} for i in range(4)]
    + [{"id": "ft", "rank": 8, "alpha": 16, "seed": 9}],
    "trainers": [{"job_id": "ft", "adapter_id": "ft", "seq_len": 16, "batch_size": 2, "epochs": None,
                  "dropout": 0.05}],
    "budget": 128, "interleave": 4, "mode": "mutable", "cost": {"overhead_ms": 40.0},
    "duration_ms": 420000.0,
})
trace = generate_phased(MUTABLE_PHASES, [f"lora{i}" for i in range(4)], seed=0)
ledger = replay(trace, cfg).runtime.ledger

buckets = ledger.buckets(10000.0, 419999.0)
ftps = np.array([b["ftps"] for b in buckets])
rps = np.array([b["rps"] for b in buckets])
print(" t(s)   rps   ftps")
for b, r, f in zip(buckets, rps, ftps):
    print("%5d  %4.1f  %6.1f  %s" % (b["bucket_start_ms"] / 1000, r, f, "#" * int(f // 5)))
for name, sl in (("phase 1", slice(0, 12)), ("phase 2", slice(12, 18)), ("phase 3", slice(18, 30)),
                 ("phase 4", slice(30, 42))):
    print("%s mean FTPS %.1f" % (name, ftps[sl].mean()))
print("SLO attainment:", ledger.attainment())
