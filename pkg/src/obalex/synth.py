"""Synthetic two-class datasets with exact object masks.

Each image is a mid-gray canvas with one object (disk or rectangle). The
class is encoded by stripe orientation only: horizontal stripes for class 0,
vertical for class 1. With ``placement="in_object"`` the stripes texture the
object itself; with ``placement="in_background"`` the object is a plain
uniform shape and the stripes sit in a separate background patch, so a
classifier can be accurate while looking entirely off-object.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .image_io import Image, write_dataset
from .metric import ActivationMap

MID_GRAY = 0.5
STRIPE_LOW, STRIPE_HIGH = 0.15, 0.85
PLAIN_OBJECT = 0.8
MAX_PLACEMENT_TRIES = 1000


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    num_classes: int = 2
    samples_per_class: int = 140
    placement: str = "in_object"
    object_shape: str = "disk"
    object_area_fraction: float = 0.12
    noise_std: float = 0.05
    seed: int = 0
    stripe_period: int = 4
    # side of the background stripe patch (in_background only)
    signal_size: int = 10
    # minimum gap between object and stripe patch bounding boxes
    margin: int = 8

    def __post_init__(self):
        problems = []
        if self.num_classes != 2:
            problems.append("num_classes must be 2")
        if self.image_size < 8:
            problems.append("image_size must be >= 8")
        if self.samples_per_class < 1:
            problems.append("samples_per_class must be >= 1")
        if self.placement not in ("in_object", "in_background"):
            problems.append(f"unknown placement {self.placement!r}")
        if self.object_shape not in ("disk", "rectangle"):
            problems.append(f"unknown object_shape {self.object_shape!r}")
        if not 0.0 < self.object_area_fraction <= 0.5:
            # the background must keep at least as much area as the object
            problems.append("object_area_fraction must lie in (0, 0.5]")
        if self.noise_std < 0.0:
            problems.append("noise_std must be nonnegative")
        if self.stripe_period < 2 or self.stripe_period % 2:
            problems.append("stripe_period must be an even number >= 2")
        if self.placement == "in_background":
            side = self.object_side
            if self.signal_size < self.stripe_period or side + self.margin + self.signal_size > 2 * self.image_size:
                problems.append("object, margin and signal patch cannot fit disjointly")
        if problems:
            raise InvalidSpec("; ".join(problems))

    @property
    def object_side(self) -> int:
        """Bounding-box side of the object."""
        area = self.object_area_fraction * self.image_size ** 2
        if self.object_shape == "disk":
            return int(np.ceil(2.0 * np.sqrt(area / np.pi)))
        return int(np.ceil(np.sqrt(area / 0.75)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown synth fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class LabeledSample:
    image_id: str
    image: Image
    label: int
    mask: ActivationMap


def stripes(height: int, width: int, label: int, period: int) -> np.ndarray:
    """Stripe texture; horizontal (varying down rows) for class 0, vertical for class 1."""
    coord = np.arange(height)[:, None] if label == 0 else np.arange(width)[None, :]
    on = (coord % period) < period // 2
    return np.broadcast_to(np.where(on, STRIPE_HIGH, STRIPE_LOW), (height, width)).copy()


def _object_mask(spec: SynthSpec, rng, top: int, left: int) -> np.ndarray:
    n = spec.image_size
    area = spec.object_area_fraction * n ** 2
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    side = spec.object_side
    if spec.object_shape == "disk":
        r = np.sqrt(area / np.pi)
        cy, cx = top + side / 2.0, left + side / 2.0
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    aspect = rng.uniform(0.75, 1.0)
    h = max(1, int(round(np.sqrt(area * aspect))))
    w = max(1, min(side, int(round(area / h))))
    h = min(h, side)
    mask = np.zeros((n, n), dtype=bool)
    mask[top:top + h, left:left + w] = True
    return mask


def _box_gap(a, b) -> int:
    """Chebyshev gap between boxes given as (top, left, size)."""
    gy = max(b[0] - (a[0] + a[2]), a[0] - (b[0] + b[2]), 0)
    gx = max(b[1] - (a[1] + a[2]), a[1] - (b[1] + b[2]), 0)
    return max(gy, gx)


def _place(spec: SynthSpec, rng):
    n = spec.image_size
    side = spec.object_side
    if spec.placement == "in_object":
        return (int(rng.integers(0, n - side + 1)), int(rng.integers(0, n - side + 1))), None
    s = spec.signal_size
    for _ in range(MAX_PLACEMENT_TRIES):
        obj = (int(rng.integers(0, n - side + 1)), int(rng.integers(0, n - side + 1)))
        sig = (int(rng.integers(0, n - s + 1)), int(rng.integers(0, n - s + 1)))
        if _box_gap((*obj, side), (*sig, s)) >= spec.margin:
            return obj, sig
    raise InvalidSpec("could not place object and signal patch disjointly")


def render_sample(spec: SynthSpec, index: int) -> LabeledSample:
    """Render sample ``index``; its generator is seeded from (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    label = index % spec.num_classes
    n = spec.image_size
    canvas = np.full((n, n), MID_GRAY)
    (top, left), signal = _place(spec, rng)
    obj = _object_mask(spec, rng, top, left)
    texture = stripes(n, n, label, spec.stripe_period)
    if spec.placement == "in_object":
        canvas[obj] = texture[obj]
    else:
        canvas[obj] = PLAIN_OBJECT
        sy, sx = signal
        s = spec.signal_size
        canvas[sy:sy + s, sx:sx + s] = texture[sy:sy + s, sx:sx + s]
    if spec.noise_std > 0.0:
        canvas = np.clip(canvas + rng.normal(0.0, spec.noise_std, size=canvas.shape), 0.0, 1.0)
    return LabeledSample(
        image_id=f"s{index:05d}",
        image=Image(canvas[None]),
        label=label,
        mask=ActivationMap(obj.astype(np.float64)),
    )


def generate(spec: SynthSpec) -> list[LabeledSample]:
    """Exactly ``samples_per_class`` samples per class, interleaved by label."""
    return [render_sample(spec, i) for i in range(spec.samples_per_class * spec.num_classes)]


def mask_background(sample: LabeledSample, seed: int) -> LabeledSample:
    """Replace every pixel with zero mask membership by uniform noise."""
    rng = np.random.default_rng(seed)
    values = sample.image.values.copy()
    noise = rng.random(values.shape)
    background = np.broadcast_to(sample.mask.values == 0.0, values.shape)
    values[background] = noise[background]
    return LabeledSample(sample.image_id, Image(values), sample.label, sample.mask)


def export(samples, root) -> Path:
    return write_dataset(root, samples)
