"""Masked autoregressive image generation with in-sequence conditioning."""

from ._selfctl import (
    ConfigError,
    Model,
    NumericalError,
    ablation_policy,
    attention_mask,
    generation_plan,
    make_dataset,
    make_sample,
    mask_dump,
    patchify,
    plan_step_sizes,
    probe_classify,
    run_cli,
    train,
    unpatchify,
)

__all__ = [
    "ConfigError",
    "Model",
    "NumericalError",
    "ablation_policy",
    "attention_mask",
    "generation_plan",
    "make_dataset",
    "make_sample",
    "mask_dump",
    "patchify",
    "plan_step_sizes",
    "probe_classify",
    "run_cli",
    "train",
    "unpatchify",
]
