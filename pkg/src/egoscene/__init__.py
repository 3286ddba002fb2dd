"""Egocentric acoustic scene classification on feature streams."""

from .datamodel import Corpus, FeatureStream, ParticipantMeta, SceneLabel, SceneSequence, Segment
from .models import ModelSpec, build_model, count_params, preset

__all__ = [
    "Corpus",
    "FeatureStream",
    "ModelSpec",
    "ParticipantMeta",
    "SceneLabel",
    "SceneSequence",
    "Segment",
    "build_model",
    "count_params",
    "preset",
]
__version__ = "0.1.0"
