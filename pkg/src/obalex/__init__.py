"""Object-aligned explanation scoring for image classifiers.

``score`` measures how much of an explanation's mass falls on the object
mask; ``avg_score`` averages it over correctly classified images.
"""
__version__ = "0.1.0"

from .errors import EmptyExplanation, NoCorrectClassifications, ObalexError, ShapeMismatch  # noqa: E402
from .metric import (  # noqa: E402
    ActivationMap,
    DatasetScore,
    ExplanationMap,
    ScoredImage,
    avg_score,
    mask_from_gray,
    normalize_explanation,
    score,
)

__all__ = [
    "ActivationMap",
    "DatasetScore",
    "EmptyExplanation",
    "ExplanationMap",
    "NoCorrectClassifications",
    "ObalexError",
    "ScoredImage",
    "ShapeMismatch",
    "avg_score",
    "mask_from_gray",
    "normalize_explanation",
    "score",
]
