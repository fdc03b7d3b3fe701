"""Object-aligned explanation score and its dataset-level average.

The per-image score is the share of an explanation's attribution mass that
falls inside the object mask::

    score(A, B) = sum_ij a_ij * b_ij / sum_ij b_ij

``A`` is a fuzzy object mask with memberships in [0, 1] and ``B`` an
explanation max-normalized to [0, 1]. The dataset score is the unweighted
mean of the per-image scores over correctly classified images only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import EmptyExplanation, NoCorrectClassifications, ShapeMismatch


def _as_grid(values) -> np.ndarray:
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    return grid


@dataclass(frozen=True, eq=False)
class ActivationMap:
    """Fuzzy object mask; ``values[i, j]`` is the membership of pixel (i, j)."""

    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.values)
        if not np.all((grid >= 0.0) & (grid <= 1.0)):
            raise ValueError("mask memberships must lie in [0, 1]")
        grid.setflags(write=False)
        object.__setattr__(self, "values", grid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class ExplanationMap:
    """Normalized explanation; the maximum is exactly 1 unless the map is empty."""

    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.values)
        if not np.all((grid >= 0.0) & (grid <= 1.0)):
            raise ValueError("explanation values must lie in [0, 1]")
        peak = grid.max()
        if peak != 0.0 and peak != 1.0:
            raise ValueError(f"a non-empty explanation must peak at exactly 1, got {peak!r}")
        grid.setflags(write=False)
        object.__setattr__(self, "values", grid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_empty(self) -> bool:
        return not self.values.any()


@dataclass(frozen=True)
class ScoredImage:
    image_id: Hashable
    score: float
    correctly_classified: bool

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")


@dataclass(frozen=True)
class DatasetScore:
    avg_score: float
    n_correct: int
    n_total: int

    def to_dict(self) -> dict:
        return {"avg_score": self.avg_score, "n_correct": self.n_correct, "n_total": self.n_total}


def score(mask: ActivationMap | np.ndarray, explanation: ExplanationMap | np.ndarray) -> float:
    """Fraction of explanation mass lying on the object mask.

    Raises:
        ShapeMismatch: the grids differ in size; resample the explanation first.
        EmptyExplanation: the explanation sums to zero and the ratio is undefined.
    """
    a = mask.values if isinstance(mask, ActivationMap) else _as_grid(mask)
    b = explanation.values if isinstance(explanation, ExplanationMap) else _as_grid(explanation)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shape {a.shape} != explanation shape {b.shape}")
    total = b.sum(dtype=np.float64)
    if total <= 0.0:
        raise EmptyExplanation("explanation has no positive attribution")
    inside = (a * b).sum(dtype=np.float64)
    # a_ij <= 1 keeps inside <= total; the min only guards the [0, 1] contract
    return float(min(max(inside / total, 0.0), 1.0))


def avg_score(scored: Iterable[ScoredImage]) -> DatasetScore:
    """Mean score over correctly classified images; misclassified ones are dropped."""
    scored = list(scored)
    kept = [s.score for s in scored if s.correctly_classified]
    if not kept:
        raise NoCorrectClassifications(
            f"none of the {len(scored)} scored images was classified correctly"
        )
    mean = math.fsum(kept) / len(kept)
    return DatasetScore(avg_score=min(max(mean, 0.0), 1.0), n_correct=len(kept), n_total=len(scored))


def normalize_explanation(raw) -> ExplanationMap:
    """Clamp negative attributions to zero and rescale so the maximum is 1.

    An all-nonpositive grid gives an all-zero map (``is_empty`` is True);
    :func:`score` rejects it later.
    """
    grid = np.maximum(_as_grid(raw), 0.0)
    peak = grid.max()
    if peak > 0.0:
        grid = grid / peak
        # x / x == 1 in IEEE arithmetic, so the peak is exactly 1 already
    return ExplanationMap(grid)


def mask_from_gray(gray: Sequence | np.ndarray) -> ActivationMap:
    """Map 8-bit intensities to memberships: 255 is object, 0 is background."""
    grid = np.asarray(gray)
    if grid.dtype.kind not in "ui":
        raise ValueError("mask_from_gray expects integer 8-bit values")
    if grid.size and (grid.min() < 0 or grid.max() > 255):
        raise ValueError("mask_from_gray expects values in 0..255")
    return ActivationMap(_as_grid(grid) / 255.0)
