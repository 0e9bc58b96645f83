"""
One forward pass, four kinds of work
====================================

A fine-tune micro-batch, an evaluation, a fresh prompt and a running decode
all share a single packed batch.  Each request still sees only its own
adapter, and its logits match a run where it was alone.
"""

import numpy as np

from unilora.flow import Kind, Work, assemble_batch, backward_finetune, causal_lm_forward
from unilora.mixed_lora import LoraAdapter
from unilora.model import BaseWeights, KvCache, ModelConfig, forward_full, prefill

cfg = ModelConfig(vocab_size=64, hidden=32, n_layers=2, n_heads=4, mlp_hidden=64, max_seq=64, dtype="float64")
base = BaseWeights.random(cfg, seed=0)
adapters = {
    "math": LoraAdapter.init(cfg, "math", rank=8, alpha=16, seed=1, b_std=0.02),
    "chat": LoraAdapter.init(cfg, "chat", rank=4, alpha=8, seed=2, b_std=0.02, targets=("q", "v")),
}
rng = np.random.default_rng(0)

# a decode needs a warm cache
running = KvCache(cfg)
prompt = rng.integers(64, size=5)
prefill(base, prompt, running, adapters["chat"])

ft_tokens = rng.integers(64, size=(2, 8))
works = [
    Work("decode", Kind.DECODE, 17, "chat", cache=running),
    Work("prompt", Kind.PREFILL, rng.integers(64, size=6), None, cache=KvCache(cfg)),
    Work("eval", Kind.EVALUATE, ft_tokens[0], "chat", labels=ft_tokens[0]),
    Work("train", Kind.FINETUNE, ft_tokens, "math", ft_tokens, accumulation=4),
]
batch = assemble_batch(works, adapters, cfg, budget=64)
print("row layout (finetune | evaluate | prefill | decode):", batch.F, batch.E, batch.P, batch.D)
print("spans:", batch.spans)

report = causal_lm_forward(base, batch)
print("finetune loss %.4f, scaled by 1/4 -> %.4f" % (report.loss("train").loss, report.loss("train").scaled_loss))
print("evaluation loss %.4f" % report.loss("eval").loss)

solo = forward_full(base, np.append(prompt, 17), adapters["chat"])[-1]
print("decode logits vs solo run, max abs diff:", np.abs(report.next_token_logits("decode") - solo).max())

# the backward only touches the owner's tensors
grads = backward_finetune(base, report, {"train": ["math"]})
print("gradients for:", sorted(grads), "tensors:", len(grads["math"]))
