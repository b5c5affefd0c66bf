"""Masked generative transformer pipeline: token-based text-to-image generation.

The heavy lifting lives in the compiled ``_musekit`` extension; this package
re-exports its public surface.
"""

from ._musekit import (
    MusekitError,
    Pipeline,
    RngState,
    cfg_logits,
    cosine_lr,
    frechet_distance,
    generate_dataset,
    guidance_at_step,
    masked_count,
    render_caption,
    sample_mask_rate,
    softmax,
    verify_caption,
)

__all__ = [
    "MusekitError",
    "Pipeline",
    "RngState",
    "cfg_logits",
    "cosine_lr",
    "frechet_distance",
    "generate_dataset",
    "guidance_at_step",
    "masked_count",
    "render_caption",
    "sample_mask_rate",
    "softmax",
    "verify_caption",
]
