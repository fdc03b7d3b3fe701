"""Explanation methods: occlusion, Grad-CAM, Grad-CAM++ and a tile surrogate.

Every method returns an :class:`~obalex.metric.ExplanationMap` at image
resolution. Attributions are clamped to be nonnegative at the source, so the
maps feed straight into :func:`obalex.metric.score`.

Model-agnostic methods (occlusion, surrogate) take a *batch* prediction
function mapping an array ``(n, channels, height, width)`` to class
probabilities ``(n, classes)``; a :class:`~obalex.tinynet.TinyNet` may be
passed directly.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .errors import EmptyExplanation, NotAConvLayer, ShapeMismatch
from .image_io import resample_bilinear
from .metric import ExplanationMap, normalize_explanation

METHODS = ("occlusion", "gradcam", "gradcampp", "surrogate")

# a surrogate tile weight below this (relative to the output scale) counts as zero
SURROGATE_ZERO_TOL = 1e-10


@dataclass
class ExplainerConfig:
    method: str = "occlusion"
    # occlusion; None picks image_side // 4 for patch and patch // 2 for stride
    patch: int | None = None
    stride: int | None = None
    fill: float = 0.5
    # gradcam / gradcampp; None picks the last conv layer
    target_layer: int | None = None
    # surrogate
    grid: int = 4
    samples: int = 200
    ridge: float = 1.0
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.patch is not None and self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.fill <= 1.0:
            raise ValueError("fill must lie in [0, 1]")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if not self.exhaustive and self.samples < self.grid ** 2:
            raise ValueError("sample count must be at least the tile count")
        if not self.ridge > 0.0:
            raise ValueError("ridge penalty must be > 0")

    @property
    def name(self) -> str:
        return self.method

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExplainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown explainer fields: {sorted(unknown)}")
        return cls(**data)

    def resolved(self, image_side: int) -> "ExplainerConfig":
        """Copy with data-dependent occlusion defaults filled in."""
        patch = self.patch if self.patch is not None else max(1, image_side // 4)
        stride = self.stride if self.stride is not None else max(1, patch // 2)
        return ExplainerConfig(**{**asdict(self), "patch": patch, "stride": stride})


def _pixels(image) -> np.ndarray:
    v = getattr(image, "values", image)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ShapeMismatch(f"expected a (channels, height, width) image, got {v.shape}")
    return v


def _predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    return model.predict_proba if hasattr(model, "predict_proba") else model


def _finish(raw: np.ndarray, what: str) -> ExplanationMap:
    explanation = normalize_explanation(raw)
    if explanation.is_empty:
        raise EmptyExplanation(f"{what}: the explainer found no positive evidence")
    return explanation


# -- occlusion --

def _positions(size: int, patch: int, stride: int) -> list[int]:
    pos = list(range(0, size - patch + 1, stride))
    if pos[-1] != size - patch:
        pos.append(size - patch)  # cover the trailing edge
    return pos


def occlusion_positions(height: int, width: int, patch: int, stride: int) -> list[tuple[int, int]]:
    if patch > height or patch > width:
        raise ShapeMismatch(f"patch {patch} does not fit a {height}x{width} image")
    return [(y, x) for y in _positions(height, patch, stride) for x in _positions(width, patch, stride)]


def occlusion_raw(model, image, target_class: int, config: ExplainerConfig, batch_size: int = 64) -> np.ndarray:
    """Mean clamped probability drop over all patches covering each pixel."""
    x = _pixels(image)
    _, h, w = x.shape
    cfg = config.resolved(min(h, w))
    predict = _predictor(model)
    p_orig = float(predict(x[None])[0, target_class])
    positions = occlusion_positions(h, w, cfg.patch, cfg.stride)
    drops = np.empty(len(positions))
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for k, (py, px) in enumerate(chunk):
            batch[k, :, py:py + cfg.patch, px:px + cfg.patch] = cfg.fill
        drops[start:start + len(chunk)] = p_orig - predict(batch)[:, target_class]
    drops = np.maximum(drops, 0.0)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for (py, px), d in zip(positions, drops):
        total[py:py + cfg.patch, px:px + cfg.patch] += d
        count[py:py + cfg.patch, px:px + cfg.patch] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def occlusion_explain(model, image, target_class: int, config: ExplainerConfig | None = None) -> ExplanationMap:
    return _finish(occlusion_raw(model, image, target_class, config or ExplainerConfig("occlusion")), "occlusion")


# -- Grad-CAM family --

def _feature_layer(net, config: ExplainerConfig) -> tuple[int, int]:
    """Return (conv layer index, index whose output is the feature map).

    When the conv is immediately followed by a ReLU the rectified output is
    used, as in frameworks where the activation is fused into the conv layer.
    """
    convs = net.conv_layer_indices()
    idx = convs[-1] if config.target_layer is None else config.target_layer
    if not 0 <= idx < len(net.layers) or net.layers[idx].kind != "conv":
        raise NotAConvLayer(f"layer {idx} is not a conv layer (conv layers: {convs})")
    out = idx + 1 if idx + 1 < len(net.layers) and net.layers[idx + 1].kind == "relu" else idx
    return idx, out


def _gradients(net, image, target_class, config):
    x = _pixels(image)
    if not 0 <= target_class < net.num_classes:
        raise ValueError(f"target class {target_class} outside [0, {net.num_classes})")
    _, layer = _feature_layer(net, config)
    feats, grads = net.feature_gradient(x, layer, target_class)
    return x, feats[0], grads[0]


def _upsample(cam: np.ndarray, h: int, w: int) -> np.ndarray:
    return resample_bilinear(cam, h, w)


def gradcam_raw(net, image, target_class: int, config: ExplainerConfig | None = None) -> np.ndarray:
    """ReLU of the gradient-weighted feature maps, at feature-map resolution."""
    x, feats, grads = _gradients(net, image, target_class, config or ExplainerConfig("gradcam"))
    alpha = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, feats, axes=1), 0.0)


def gradcam_explain(net, image, target_class: int, config: ExplainerConfig | None = None) -> ExplanationMap:
    x = _pixels(image)
    cam = gradcam_raw(net, x, target_class, config)
    if not cam.any():
        raise EmptyExplanation("gradcam: the explainer found no positive evidence")
    # normalize before and after upsampling; resampling can lower the peak
    up = _upsample(normalize_explanation(cam).values, x.shape[1], x.shape[2])
    return _finish(up, "gradcam")


def gradcampp_weights(feats: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-location coefficients for an exponential output on a piecewise-linear net.

    With ``g = dS/dA`` the higher derivatives of ``exp(S)`` reduce to powers of
    ``g``, giving ``g^2 / (2 g^2 + sum_ab A_ab g^3)``; zero where the
    denominator vanishes.
    """
    g2 = grads ** 2
    g3 = g2 * grads
    denom = 2.0 * g2 + feats.sum(axis=(1, 2), keepdims=True) * g3
    return np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0.0)


def gradcampp_raw(net, image, target_class: int, config: ExplainerConfig | None = None) -> np.ndarray:
    x, feats, grads = _gradients(net, image, target_class, config or ExplainerConfig("gradcampp"))
    alpha = gradcampp_weights(feats, grads)
    weights = (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))
    return np.maximum(np.tensordot(weights, feats, axes=1), 0.0)


def gradcampp_explain(net, image, target_class: int, config: ExplainerConfig | None = None) -> ExplanationMap:
    x = _pixels(image)
    cam = gradcampp_raw(net, x, target_class, config)
    if not cam.any():
        raise EmptyExplanation("gradcampp: the explainer found no positive evidence")
    up = _upsample(normalize_explanation(cam).values, x.shape[1], x.shape[2])
    return _finish(up, "gradcampp")


# -- tile surrogate (LIME-style on a fixed grid) --

def tile_edges(size: int, grid: int) -> np.ndarray:
    if grid > size:
        raise ShapeMismatch(f"grid {grid} is finer than the image side {size}")
    return np.linspace(0, size, grid + 1).round().astype(int)


def tile_index_map(height: int, width: int, grid: int) -> np.ndarray:
    """Tile number (row-major over the grid) of every pixel."""
    ys = np.searchsorted(tile_edges(height, grid), np.arange(height), side="right") - 1
    xs = np.searchsorted(tile_edges(width, grid), np.arange(width), side="right") - 1
    return ys[:, None] * grid + xs[None, :]


def _surrogate_masks(config: ExplainerConfig) -> np.ndarray:
    n_tiles = config.grid ** 2
    if config.exhaustive:
        if n_tiles > 16:
            raise ValueError("exhaustive enumeration is limited to grids of at most 16 tiles")
        return np.array(list(itertools.product((0, 1), repeat=n_tiles)), dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    return (rng.random((config.samples, n_tiles)) < 0.5).astype(np.float64)


def weighted_ridge(z: np.ndarray, y: np.ndarray, weights: np.ndarray, penalty: float):
    """Weighted ridge regression with an unpenalized intercept.

    Minimizes ``sum_s w_s (y_s - c - z_s . beta)^2 + penalty * |beta|^2``.
    Returns ``(beta, c)``.
    """
    wsum = weights.sum()
    z_mean = weights @ z / wsum
    y_mean = weights @ y / wsum
    zc = z - z_mean
    yc = y - y_mean
    lhs = zc.T @ (weights[:, None] * zc) + penalty * np.eye(z.shape[1])
    rhs = zc.T @ (weights * yc)
    beta = np.linalg.solve(lhs, rhs)
    return beta, float(y_mean - z_mean @ beta)


def surrogate_weights(model, image, target_class: int, config: ExplainerConfig, batch_size: int = 64):
    """Fit the tile surrogate; returns ``(tile_weights, intercept)``."""
    x = _pixels(image)
    _, h, w = x.shape
    tiles = tile_index_map(h, w, config.grid)
    z = _surrogate_masks(config)
    predict = _predictor(model)
    y = np.empty(len(z))
    for start in range(0, len(z), batch_size):
        chunk = z[start:start + batch_size]
        keep = chunk[:, tiles]  # (n, h, w) 1 where the tile survives
        batch = x[None] * keep[:, None] + 0.5 * (1.0 - keep[:, None])
        y[start:start + len(chunk)] = predict(batch)[:, target_class]
    sigma = config.grid ** 2 / 4.0
    distance = (1.0 - z).sum(axis=1)  # Hamming distance to the unperturbed image
    beta, intercept = weighted_ridge(z, y, np.exp(-distance / sigma), config.ridge)
    floor = SURROGATE_ZERO_TOL * max(1.0, float(np.abs(y).max()))
    beta = np.where(np.abs(beta) <= floor, 0.0, beta)
    return beta, intercept


def surrogate_explain(model, image, target_class: int, config: ExplainerConfig | None = None) -> ExplanationMap:
    config = config or ExplainerConfig("surrogate")
    x = _pixels(image)
    beta, _ = surrogate_weights(model, x, target_class, config)
    raw = np.maximum(beta, 0.0)[tile_index_map(x.shape[1], x.shape[2], config.grid)]
    return _finish(raw, "surrogate")


def explain(model, image, target_class: int, config: ExplainerConfig) -> ExplanationMap:
    """Dispatch on ``config.method``."""
    if config.method == "occlusion":
        return occlusion_explain(model, image, target_class, config)
    if config.method == "surrogate":
        return surrogate_explain(model, image, target_class, config)
    if not hasattr(model, "feature_gradient"):
        raise TypeError(f"{config.method} needs a TinyNet, not a bare prediction function")
    if config.method == "gradcam":
        return gradcam_explain(model, image, target_class, config)
    return gradcampp_explain(model, image, target_class, config)
