"""tinysep: small, fast mask-based continuous speech separation models
trained by layer-wise teacher-student distillation with objective
shifting."""

from .dsp import (
    MaskSet,
    Spectrogram,
    StftConfig,
    Waveform,
    apply_mask,
    features,
    istft,
    stft,
)
from .losses import (
    LayerMapSpec,
    ProjectionSet,
    ShiftSchedule,
    combined_loss,
    lambda_weight,
    layer_loss,
    layer_map,
    lts_loss,
    lts_weights,
    pit_loss,
    ts_loss,
)
from .mixer import CorpusTemplate, MixSpec, MixtureSample, make_corpus, mix
from .model import (
    MaskEstimator,
    ModelConfig,
    build_model,
    count_parameters,
    student_multi_preset,
    student_single_preset,
    teacher_preset,
)
from .train import OptimConfig, RunManifest, lr_at

__version__ = "0.1.0"

__all__ = [
    "MaskSet",
    "Spectrogram",
    "StftConfig",
    "Waveform",
    "apply_mask",
    "features",
    "istft",
    "stft",
    "LayerMapSpec",
    "ProjectionSet",
    "ShiftSchedule",
    "combined_loss",
    "lambda_weight",
    "layer_loss",
    "layer_map",
    "lts_loss",
    "lts_weights",
    "pit_loss",
    "ts_loss",
    "CorpusTemplate",
    "MixSpec",
    "MixtureSample",
    "make_corpus",
    "mix",
    "MaskEstimator",
    "ModelConfig",
    "build_model",
    "count_parameters",
    "student_multi_preset",
    "student_single_preset",
    "teacher_preset",
    "OptimConfig",
    "RunManifest",
    "lr_at",
]
