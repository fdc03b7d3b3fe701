"""PNG images, masks and heatmaps; bilinear resampling; overlay rendering.

Images are held channel-first (``channels, height, width``) with unit-interval
intensities, which is the layout the network consumes.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import PngImagePlugin, UnidentifiedImageError

from .errors import IoError, ShapeMismatch, UnsupportedFormat
from .metric import ActivationMap, ExplanationMap, mask_from_gray

OVERLAY_ALPHA = 0.5
CONTOUR_RGB = (0.0, 1.0, 0.0)


@dataclass(eq=False)
class Image:
    """Channel-first image with values in [0, 1]."""

    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] not in (1, 3):
            raise UnsupportedFormat(f"images need 1 or 3 channels, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        self.values = v

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _open_png(path) -> PILImage.Image:
    try:
        im = PILImage.open(path)
        im.load()
    except FileNotFoundError as exc:
        raise IoError(f"{path}: no such file") from exc
    except (OSError, SyntaxError, UnidentifiedImageError, ValueError) as exc:
        raise IoError(f"{path}: cannot decode PNG ({exc})") from exc
    if im.format != "PNG":
        raise UnsupportedFormat(f"{path}: expected PNG, got {im.format}")
    return im


def load_image(path) -> Image:
    im = _open_png(path)
    if im.mode == "L":
        arr = np.asarray(im, dtype=np.uint8)[None]
    elif im.mode == "RGB":
        arr = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
    else:
        raise UnsupportedFormat(f"{path}: mode {im.mode!r} is not 8-bit grayscale or RGB")
    return Image(arr / 255.0)


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: Image, text: dict | None = None) -> None:
    v = image.values
    pil = PILImage.fromarray(_to_bytes(v[0]) if v.shape[0] == 1 else _to_bytes(v.transpose(1, 2, 0)))
    info = None
    if text:
        info = PngImagePlugin.PngInfo()
        for key, value in text.items():
            info.add_text(key, str(value))
    try:
        pil.save(path, format="PNG", pnginfo=info)
    except OSError as exc:
        raise IoError(f"{path}: cannot write PNG ({exc})") from exc


def load_mask(path) -> ActivationMap:
    im = _open_png(path)
    if im.mode != "L":
        raise UnsupportedFormat(f"{path}: masks must be single-channel 8-bit, got mode {im.mode!r}")
    return mask_from_gray(np.asarray(im, dtype=np.uint8))


def save_mask(path, mask: ActivationMap) -> None:
    try:
        PILImage.fromarray(_to_bytes(mask.values)).save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"{path}: cannot write PNG ({exc})") from exc


# -- heatmaps: 16-bit grayscale PNG plus a JSON sidecar holding the scale --

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_heatmap(values) -> tuple[np.ndarray, float]:
    """Quantize nonnegative attributions to uint16 codes and a scale factor."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("heatmaps are 2-D grids")
    if v.size and v.min() < 0.0:
        raise ValueError("heatmap values must be nonnegative")
    scale = float(v.max()) if v.size and v.max() > 0.0 else 1.0
    codes = np.rint(v / scale * 65535.0).astype(np.uint16)
    return codes, scale


def decode_heatmap(codes: np.ndarray, scale: float) -> np.ndarray:
    return codes.astype(np.float64) / 65535.0 * scale


def save_heatmap(path, values, image_id: str) -> Path:
    codes, scale = encode_heatmap(values)
    try:
        PILImage.fromarray(codes).save(path, format="PNG")
        sidecar = sidecar_path(path)
        sidecar.write_text(json.dumps({"image_id": str(image_id), "scale": scale}, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"{path}: cannot write heatmap ({exc})") from exc
    return sidecar


def load_heatmap(path) -> tuple[np.ndarray, dict]:
    """Decode a heatmap; plain 8-bit grayscale PNGs without a sidecar are accepted too."""
    im = _open_png(path)
    sidecar = sidecar_path(path)
    meta = {}
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
            scale = float(meta["scale"])
        except (ValueError, KeyError, TypeError) as exc:
            raise IoError(f"{sidecar}: malformed heatmap sidecar ({exc})") from exc
    else:
        scale = 1.0
    if im.mode in ("I;16", "I;16B", "I"):
        return decode_heatmap(np.asarray(im).astype(np.uint16), scale), meta
    if im.mode == "L":
        return np.asarray(im, dtype=np.float64) / 255.0 * scale, meta
    raise UnsupportedFormat(f"{path}: heatmaps must be grayscale, got mode {im.mode!r}")


# -- geometry --

def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resample_bilinear(grid, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D grid."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or min(g.shape) < 1 or target_h < 1 or target_w < 1:
        raise ValueError("source and target dimensions must be >= 1")
    if g.shape == (target_h, target_w):
        return g.copy()
    y0, y1, fy = _axis_weights(g.shape[0], target_h)
    x0, x1, fx = _axis_weights(g.shape[1], target_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = g[y0][:, x0] * (1.0 - fx) + g[y0][:, x1] * fx
    bottom = g[y1][:, x0] * (1.0 - fx) + g[y1][:, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    # convex combinations can drift by an ulp; keep the range contract exact
    return np.clip(out, g.min(), g.max())


def mask_contour(mask: ActivationMap) -> np.ndarray:
    """Object pixels (membership >= 0.5) with at least one 4-neighbour outside the object."""
    inside = mask.values >= 0.5
    padded = np.pad(inside, 1, constant_values=True)
    all_neighbours_in = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return inside & ~all_neighbours_in


def render_overlay(image: Image, explanation: ExplanationMap, mask: ActivationMap, score) -> Image:
    """Blend a red heat layer (alpha = 0.5 * b) over the image and trace the mask in green."""
    shapes = {(image.height, image.width), explanation.shape, mask.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(
            f"image {(image.height, image.width)}, explanation {explanation.shape} "
            f"and mask {mask.shape} must share dimensions"
        )
    base = image.values if image.channels == 3 else np.repeat(image.values, 3, axis=0)
    alpha = OVERLAY_ALPHA * explanation.values
    out = base * (1.0 - alpha)
    out[0] += alpha
    contour = mask_contour(mask)
    for c, value in enumerate(CONTOUR_RGB):
        out[c][contour] = value
    return Image(np.clip(out, 0.0, 1.0), metadata={"obalex_score": score})


def save_overlay(path, overlay: Image) -> None:
    score = overlay.metadata.get("obalex_score")
    save_image(path, overlay, text={"obalex_score": "null" if score is None else repr(float(score))})


# -- dataset directories: images/<id>.png, masks/<id>.png, labels.csv --

def write_dataset(root, samples) -> Path:
    """Write ``samples`` (objects with image_id, image, label, mask) to a dataset directory."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        save_image(root / "images" / f"{s.image_id}.png", s.image)
        save_mask(root / "masks" / f"{s.image_id}.png", s.mask)
        rows.append((s.image_id, int(s.label)))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        writer.writerows(rows)
    return root


def read_labels(path) -> list[tuple[str, int]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "label"]:
                raise UnsupportedFormat(f"{path}: header must be 'id,label', got {header}")
            return [(row[0], int(row[1])) for row in reader if row]
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    except (ValueError, IndexError) as exc:
        raise UnsupportedFormat(f"{path}: malformed row ({exc})") from exc


def validate_dataset_dir(root) -> list[str]:
    """Return a list of layout problems; empty when the directory is well-formed."""
    root = Path(root)
    problems = []
    if not (root / "labels.csv").is_file():
        return [f"{root}: missing labels.csv"]
    try:
        rows = read_labels(root / "labels.csv")
    except (IoError, UnsupportedFormat) as exc:
        return [str(exc)]
    for image_id, label in rows:
        if label < 0:
            problems.append(f"{image_id}: negative label {label}")
        for sub in ("images", "masks"):
            if not (root / sub / f"{image_id}.png").is_file():
                problems.append(f"{image_id}: missing {sub}/{image_id}.png")
    return problems


def read_dataset(root):
    """Load a dataset directory into a list of :class:`obalex.synth.LabeledSample`."""
    from .synth import LabeledSample

    root = Path(root)
    samples = []
    for image_id, label in read_labels(root / "labels.csv"):
        samples.append(
            LabeledSample(
                image_id=image_id,
                image=load_image(root / "images" / f"{image_id}.png"),
                label=label,
                mask=load_mask(root / "masks" / f"{image_id}.png"),
            )
        )
    return samples


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
