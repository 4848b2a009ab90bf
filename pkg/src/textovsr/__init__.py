"""Text-guided video super-resolution with contrastive negative branches."""
from .degrade import DegradationRecord, VideoClip, degrade_clip, sample_pipeline
from .drf import DRF, DrfConfig
from .generator import GeneratorConfig, TextOVSRGenerator
from .losses import LossWeights
from .prompts import HashTextEncoder, PromptPack, TemplateCaptioner
from .ted import Discriminator, TedConfig

__version__ = "0.1.0"

__all__ = [
    "DRF",
    "DegradationRecord",
    "Discriminator",
    "DrfConfig",
    "GeneratorConfig",
    "HashTextEncoder",
    "LossWeights",
    "PromptPack",
    "TedConfig",
    "TemplateCaptioner",
    "TextOVSRGenerator",
    "VideoClip",
    "degrade_clip",
    "sample_pipeline",
]
