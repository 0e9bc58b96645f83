"""Unified LoRA fine-tuning and inference over one shared toy Llama-shaped base."""

from .flow import (
    AmbiguousOwnershipError,
    BudgetError,
    Kind,
    LossReport,
    UnifiedBatch,
    Work,
    assemble_batch,
    backward_finetune,
    causal_lm_forward,
)
from .mixed_lora import (
    AdapterError,
    AdapterTable,
    LoraAdapter,
    LoraPair,
    Segment,
    SegmentMap,
    apply_dynamic_scale,
    bake_static_scaling,
    smlm_backward_lora,
    smlm_forward,
)
from .model import TARGETS, BaseWeights, KvCache, ModelConfig, decode_step, forward_full, prefill
from .runtime import (
    Allocation,
    CostModel,
    MetricsLedger,
    Request,
    Runtime,
    SloPolicy,
    StepReport,
    allocate_capacity,
    slo_verdict,
)
from .training import TrainerState
from .virtual_module import ModelLibrary, VirtualModel, VoidedAdapterBundle, unvoid_into, void_model

__version__ = "0.1.0"
