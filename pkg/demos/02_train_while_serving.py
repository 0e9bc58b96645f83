"""
Fine-tuning while serving
=========================

A trainer and live requests share one runtime.  Decodes and prompts go
first; the trainer takes leftover rows on every ``interleave``-th step.  At
the end the served adapters are byte-identical to where they started.
"""

import numpy as np

from unilora.mixed_lora import LoraAdapter
from unilora.model import BaseWeights, ModelConfig
from unilora.runtime import Request, Runtime
from unilora.training import TrainerState

cfg = ModelConfig(vocab_size=64, hidden=32, n_layers=2, n_heads=4, mlp_hidden=64, max_seq=128, dtype="float64")
base = BaseWeights.random(cfg, seed=0)
rt = Runtime(base, budget=96, interleave=4, mode="mutable")
vm = rt.library.get("default")
served = vm.attach_adapter(LoraAdapter.init(cfg, "served", rank=8, alpha=16, seed=1, b_std=0.02))
vm.attach_adapter(LoraAdapter.init(cfg, "learner", rank=8, alpha=16, seed=2))
rt.add_trainer(TrainerState("job", "learner", seq_len=16, batch_size=2, accumulation=4, lr=1e-2,
                            dataset_size=16, epochs=None))
before = served.content_hash()

rng = np.random.default_rng(1)
arrivals = [Request(f"r{i}", "prefill", rng.integers(64, size=int(rng.integers(4, 12))), "served",
                    max_new_tokens=8, arrival_ms=i * 150.0) for i in range(12)]

losses = []
while rt.now < 4000:
    while arrivals and arrivals[0].arrival_ms <= rt.now:
        rt.admit(arrivals.pop(0))
    rep = rt.step()
    if "job" in rep.losses:
        losses.append(rep.losses["job"])
rt.finalize()

led = rt.ledger
print("steps:", len(led.steps), " virtual time: %.0f ms" % rt.now)
print("decode tokens:", sum(c for _, c in led.decode_tokens), " fine-tune tokens:", sum(c for _, c in led.finetune_tokens))
print("training loss: first %.3f, last %.3f over %d micro-batches" % (losses[0], losses[-1], len(losses)))
print("optimizer steps:", rt.trainer("job").optimizer_steps)
print("SLO attainment:", led.attainment())
print("served adapter unchanged:", served.content_hash() == before)
