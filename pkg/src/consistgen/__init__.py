"""Training-free subject-consistent batch generation over a toy diffusion denoiser."""

from .denoiser import DenoiserConfig, PromptSpec, init_denoiser
from .pipeline import GenerationConfig, generate, invert_anchor, personalize, reuse_subject

__all__ = [
    "DenoiserConfig",
    "GenerationConfig",
    "PromptSpec",
    "generate",
    "init_denoiser",
    "invert_anchor",
    "personalize",
    "reuse_subject",
]
__version__ = "0.1.0"
