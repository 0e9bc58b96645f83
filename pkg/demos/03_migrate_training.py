"""
Moving a training job between runtimes
======================================

Train for a while, pause, void the instance into a bundle file, and unvoid
it into a second runtime built over an equal base.  The moved job finishes
with the same bytes as a run that never stopped.
"""

import tempfile
from pathlib import Path

from unilora.mixed_lora import LoraAdapter
from unilora.model import BaseWeights, ModelConfig
from unilora.runtime import Runtime
from unilora.training import TrainerState
from unilora.virtual_module import VoidedAdapterBundle, unvoid_into, void_model

cfg = ModelConfig(vocab_size=64, hidden=32, n_layers=2, n_heads=4, mlp_hidden=64, max_seq=64, dtype="float64")


def fresh_runtime(with_job=True):
    rt = Runtime(BaseWeights.random(cfg, seed=0), mode="finetune", budget=64)
    if with_job:
        rt.library.get("default").attach_adapter(LoraAdapter.init(cfg, "a", rank=8, alpha=16, seed=3))
        rt.add_trainer(TrainerState("job", "a", seq_len=16, batch_size=2, accumulation=4, lr=1e-2,
                                    dropout=0.05, epochs=None))
    return rt


straight = fresh_runtime()
for _ in range(24):
    straight.step()

first = fresh_runtime()
for _ in range(10):  # stops mid accumulation window: 10 = 2 * 4 + 2
    first.step()
first.pause_trainer("job")
bundle_path = Path(tempfile.mkdtemp()) / "job.ulw"
void_model(first.library.get("default")).save(bundle_path)
print("bundle: %d bytes, base: %d bytes" % (bundle_path.stat().st_size, first.base.nbytes))

second = fresh_runtime(with_job=False)
unvoid_into(VoidedAdapterBundle.load(bundle_path), second.library.get("default"))
st = second.trainer("job")
print("restored: status=%s micro_steps=%d pending micro-batches=%d" % (st.status, st.micro_steps, st.micro_count))
second.resume_trainer("job")
for _ in range(14):
    second.step()

same = second.library.adapter("a").content_hash() == straight.library.adapter("a").content_hash()
print("optimizer steps:", second.trainer("job").optimizer_steps, straight.trainer("job").optimizer_steps)
print("bit-identical to the uninterrupted run:", same)
