"""Limited-supervision 3D lesion segmentation: self-supervised pre-training,
semi-supervised fine-tuning and sliding-window evaluation on FLAIR/T1w pairs."""
from .errors import ConfigError, LesionSegError
from .model import EncoderConfig, build_model
from .volume import PhantomSpec, Sample, generate_phantom, preprocess

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "LesionSegError",
    "PhantomSpec",
    "Sample",
    "build_model",
    "generate_phantom",
    "preprocess",
]
