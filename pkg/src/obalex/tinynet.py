"""A small deterministic CNN: forward, backprop, SGD and block freezing.

Parameters are stored at 32-bit by default and every computation runs at
64-bit. Layers are grouped into blocks so that whole blocks can be frozen,
mirroring transfer-learning recipes for VGG-style networks: conv blocks 1-5
plus one dense block.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    BadMagic,
    EmptyDataset,
    IoError,
    LabelOutOfRange,
    ShapeMismatch,
    VersionUnsupported,
)

DENSE_BLOCK = 6
STRATEGIES = {
    "a": frozenset({DENSE_BLOCK}),
    "b": frozenset({4, 5}),
    "c": frozenset({1, 2, 3}),
    "d": frozenset({1, 2, 3, 4, 5, DENSE_BLOCK}),
}
KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "softmax")

MAGIC = b"OBLX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Only the fields relevant to ``kind`` are used."""

    kind: str
    block: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")


def conv(cin, cout, k=3, stride=1, padding=1, block=0):
    return LayerSpec("conv", block, in_channels=cin, out_channels=cout, kernel=k, stride=stride, padding=padding)


def relu(block=0):
    return LayerSpec("relu", block)


def maxpool(window=2, stride=2, block=0):
    return LayerSpec("maxpool", block, window=window, stride=stride)


def flatten(block=0):
    return LayerSpec("flatten", block)


def dense(fin, fout, block=0):
    return LayerSpec("dense", block, in_features=fin, out_features=fout)


def softmax(block=0):
    return LayerSpec("softmax", block)


def _out_shape(spec: LayerSpec, shape: tuple) -> tuple:
    if spec.kind == "conv":
        c, h, w = shape
        if c != spec.in_channels:
            raise ShapeMismatch(f"conv expects {spec.in_channels} channels, got {c}")
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv kernel {spec.kernel} does not fit input {shape}")
        return (spec.out_channels, ho, wo)
    if spec.kind == "maxpool":
        c, h, w = shape
        ho = (h - spec.window) // spec.stride + 1
        wo = (w - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"pool window {spec.window} does not fit input {shape}")
        return (c, ho, wo)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if shape != (spec.in_features,):
            raise ShapeMismatch(f"dense expects ({spec.in_features},), got {shape}")
        return (spec.out_features,)
    return shape


class TinyNet:
    """Sequential CNN ending in a softmax layer.

    ``params[i]`` is ``None`` for parameter-free layers and a dict with ``"W"``
    and ``"b"`` otherwise. ``trainable[i]`` is the per-layer update flag; it is
    normally driven block-wise through :meth:`set_strategy`.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape, num_classes: int,
                 params=None, seed: int = 0, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("the last layer must be softmax")
        self.shapes = [self.input_shape]
        for spec in self.layers:
            self.shapes.append(_out_shape(spec, self.shapes[-1]))
        if self.shapes[-1] != (self.num_classes,):
            raise ShapeMismatch(f"network emits {self.shapes[-1]}, expected ({self.num_classes},)")
        if params is None:
            params = self._init_params(seed)
        self.params = params
        for spec, p in zip(self.layers, self.params):
            if spec.has_params:
                w_shape, b_shape = self._param_shapes(spec)
                if p is None or p["W"].shape != w_shape or p["b"].shape != b_shape:
                    raise ShapeMismatch(f"parameters for {spec.kind} layer do not match {w_shape}")
        self.trainable = [spec.has_params for spec in self.layers]

    @staticmethod
    def _param_shapes(spec):
        if spec.kind == "conv":
            return (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), (spec.out_channels,)
        return (spec.out_features, spec.in_features), (spec.out_features,)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = []
        for spec in self.layers:
            if not spec.has_params:
                params.append(None)
                continue
            w_shape, b_shape = self._param_shapes(spec)
            if spec.kind == "conv":
                fan_in = spec.in_channels * spec.kernel ** 2
                fan_out = spec.out_channels * spec.kernel ** 2
            else:
                fan_in, fan_out = spec.in_features, spec.out_features
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.append({
                "W": rng.uniform(-limit, limit, size=w_shape).astype(self.dtype),
                "b": np.zeros(b_shape, dtype=self.dtype),
            })
        return params

    # -- bookkeeping --

    @property
    def blocks(self) -> list[int]:
        return sorted({spec.block for spec in self.layers if spec.has_params})

    @property
    def trainable_blocks(self) -> set[int]:
        return {s.block for s, t in zip(self.layers, self.trainable) if s.has_params and t}

    @property
    def n_params(self) -> int:
        return sum(p["W"].size + p["b"].size for p in self.params if p is not None)

    def conv_layer_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == "conv"]

    def set_trainable_blocks(self, blocks) -> "TinyNet":
        blocks = set(blocks)
        self.trainable = [s.has_params and s.block in blocks for s in self.layers]
        return self

    def set_strategy(self, strategy: str) -> "TinyNet":
        """Apply freezing strategy a, b, c or d; flags are overwritten, not merged."""
        try:
            return self.set_trainable_blocks(STRATEGIES[strategy])
        except KeyError:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of a, b, c, d") from None

    def set_output_only(self) -> "TinyNet":
        """Freeze everything except the final dense layer (adaptation phase)."""
        last = max(i for i, s in enumerate(self.layers) if s.kind == "dense")
        self.trainable = [i == last for i in range(len(self.layers))]
        return self

    def clone(self) -> "TinyNet":
        return copy.deepcopy(self)

    def parameter_vector(self) -> np.ndarray:
        parts = [a.ravel() for p in self.params if p is not None for a in (p["W"], p["b"])]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)

    # -- computation --

    def _batch(self, x) -> np.ndarray:
        if hasattr(x, "values") and not isinstance(x, np.ndarray):
            x = x.values
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} != {self.input_shape}")
        return np.ascontiguousarray(x)

    def forward(self, x):
        """Run a batch (or a single image) through the network.

        Returns ``(probabilities, cache)``; ``cache["acts"][i]`` is the input of
        layer ``i`` and ``cache["acts"][-1]`` the probabilities.
        """
        a = self._batch(x)
        acts = [a]
        aux = {}
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if spec.kind == "conv":
                a = kernels.conv2d_forward(a, p["W"].astype(np.float64), p["b"].astype(np.float64),
                                           spec.stride, spec.padding)
            elif spec.kind == "relu":
                a = np.maximum(a, 0.0)
            elif spec.kind == "maxpool":
                a, aux[i] = kernels.maxpool_forward(a, spec.window, spec.stride)
            elif spec.kind == "flatten":
                a = np.ascontiguousarray(a.reshape(a.shape[0], -1))
            elif spec.kind == "dense":
                a = kernels.dense_forward(a, np.ascontiguousarray(p["W"], dtype=np.float64),
                                          p["b"].astype(np.float64))
            else:
                shifted = a - a.max(axis=1, keepdims=True)
                e = np.exp(shifted)
                a = e / e.sum(axis=1, keepdims=True)
            acts.append(a)
        return a, {"acts": acts, "aux": aux}

    def predict_proba(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def logits(self, cache) -> np.ndarray:
        return cache["acts"][-2]

    def backprop(self, cache, dlogits, collect=()):
        """Propagate a gradient on the logits back to the input.

        Returns ``(param_grads, input_grad, collected)`` where ``collected``
        maps each requested layer index to the gradient of its *output*.
        """
        acts, aux = cache["acts"], cache["aux"]
        grads = [None] * len(self.layers)
        collected = {}
        g = np.ascontiguousarray(dlogits, dtype=np.float64)
        for i in range(len(self.layers) - 2, -1, -1):
            if i in collect:
                collected[i] = g
            spec, p, x = self.layers[i], self.params[i], acts[i]
            if spec.kind == "conv":
                g, dw, db = kernels.conv2d_backward(x, p["W"].astype(np.float64), g, spec.stride, spec.padding)
                grads[i] = {"W": dw, "b": db}
            elif spec.kind == "relu":
                g = g * (x > 0.0)
            elif spec.kind == "maxpool":
                g = kernels.maxpool_backward(np.ascontiguousarray(g), aux[i], x.shape)
            elif spec.kind == "flatten":
                g = np.ascontiguousarray(g.reshape(x.shape))
            elif spec.kind == "dense":
                g, dw, db = kernels.dense_backward(x, np.ascontiguousarray(p["W"], dtype=np.float64), g)
                grads[i] = {"W": dw, "b": db}
            else:
                raise ValueError("softmax may only appear as the last layer")
        return grads, g, collected

    def backward(self, x, labels):
        """Mean cross-entropy (nats) over the batch and its exact gradients.

        Returns ``(loss, param_grads, input_grad, probabilities)``.
        """
        probs, cache = self.forward(x)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        n = probs.shape[0]
        if labels.shape != (n,):
            raise ShapeMismatch(f"{labels.shape[0]} labels for a batch of {n}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")
        logits = self.logits(cache)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses = -log_probs[np.arange(n), labels]
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), labels] = 1.0
        dlogits = (probs - onehot) / n
        grads, input_grad, _ = self.backprop(cache, dlogits)
        return float(losses.mean()), grads, input_grad, probs

    def feature_gradient(self, x, layer_index: int, target_class: int):
        """Activations at ``layer_index``'s output and d(logit_target)/d(those activations)."""
        _, cache = self.forward(x)
        dlogits = np.zeros_like(self.logits(cache))
        dlogits[:, target_class] = 1.0
        _, _, collected = self.backprop(cache, dlogits, collect={layer_index})
        return cache["acts"][layer_index + 1], collected[layer_index]

    def predict(self, x) -> tuple[int, float]:
        """Label and confidence for one image; ties go to the lowest class index."""
        probs = self.predict_proba(x)[0]
        label = int(np.argmax(probs))
        return label, float(probs[label])


def toy_vgg(input_shape=(1, 32, 32), num_classes=2, seed=0, hidden=32,
            light_channels=4, dtype=np.float32) -> TinyNet:
    """Five conv blocks plus a dense block.

    Blocks 1-3 are light 3x3 convs at full resolution; blocks 4 and 5 are
    conv3x3x8 and conv3x3x16, each followed by 2x2 max pooling.
    """
    c, h, w = input_shape
    lc = light_channels
    layers = [
        conv(c, lc, block=1), relu(1),
        conv(lc, lc, block=2), relu(2),
        conv(lc, lc, block=3), relu(3),
        conv(lc, 8, block=4), relu(4), maxpool(block=4),
        conv(8, 16, block=5), relu(5), maxpool(block=5),
        flatten(DENSE_BLOCK),
        dense(16 * (h // 4) * (w // 4), hidden, DENSE_BLOCK), relu(DENSE_BLOCK),
        dense(hidden, num_classes, DENSE_BLOCK),
        softmax(DENSE_BLOCK),
    ]
    return TinyNet(layers, input_shape, num_classes, seed=seed, dtype=dtype)


# -- training --

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    strategy: str | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.strategy is not None and self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


def sgd_step(net: TinyNet, grads, learning_rate: float) -> TinyNet:
    """In-place ``w -= lr * g`` on trainable layers; frozen layers are not touched."""
    for i, (spec, p, g) in enumerate(zip(net.layers, net.params, grads)):
        if not spec.has_params or not net.trainable[i]:
            continue
        if g is None:
            raise ShapeMismatch(f"missing gradient for layer {i}")
        for key in ("W", "b"):
            if g[key].shape != p[key].shape:
                raise ShapeMismatch(f"gradient shape {g[key].shape} != parameter shape {p[key].shape}")
            p[key] = (p[key].astype(np.float64) - learning_rate * g[key]).astype(net.dtype)
    return net


def _dataset_arrays(images, labels):
    x = np.asarray([getattr(im, "values", im) for im in images], dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} images but {y.shape[0]} labels")
    return x, y


def train_epoch(net: TinyNet, x: np.ndarray, y: np.ndarray, config: TrainConfig, rng) -> tuple[float, float]:
    """One shuffled pass of mini-batch SGD; returns (mean loss, accuracy) seen during the pass."""
    order = rng.permutation(len(x))
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(x), config.batch_size):
        idx = order[start:start + config.batch_size]
        loss, grads, _, probs = net.backward(x[idx], y[idx])
        loss_sum += loss * len(idx)
        correct += int((probs.argmax(axis=1) == y[idx]).sum())
        sgd_step(net, grads, config.learning_rate)
    return loss_sum / len(x), correct / len(x)


def train(net: TinyNet, images, labels, config: TrainConfig):
    """Train a copy of ``net``; returns ``(trained_net, history)``.

    ``history`` holds one ``{"epoch", "loss", "accuracy"}`` dict per epoch.
    """
    x, y = _dataset_arrays(images, labels)
    if y.min() < 0 or y.max() >= net.num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {net.num_classes})")
    net = net.clone()
    if config.strategy is not None:
        net.set_strategy(config.strategy)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        loss, acc = train_epoch(net, x, y, config, rng)
        history.append({"epoch": epoch, "loss": loss, "accuracy": acc})
    return net, history


def predict(net: TinyNet, image) -> tuple[int, float]:
    return net.predict(image)


def set_strategy(net: TinyNet, strategy: str) -> TinyNet:
    return net.set_strategy(strategy)


# -- persistence --

_KIND_CODES = {k: i for i, k in enumerate(KINDS)}
_HEADER = struct.Struct("<4sHHHHHH")  # magic, version, C, H, W, classes, n_layers
_LAYER = struct.Struct("<BBBHHHHH")  # kind, block, trainable, five shape fields


def _layer_fields(spec: LayerSpec):
    if spec.kind == "conv":
        return (spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
    if spec.kind == "maxpool":
        return (spec.window, spec.stride, 0, 0, 0)
    if spec.kind == "dense":
        return (spec.in_features, spec.out_features, 0, 0, 0)
    return (0, 0, 0, 0, 0)


def _layer_from_fields(kind, block, f):
    if kind == "conv":
        return conv(f[0], f[1], f[2], f[3], f[4], block=block)
    if kind == "maxpool":
        return maxpool(f[0], f[1], block=block)
    if kind == "dense":
        return dense(f[0], f[1], block=block)
    return LayerSpec(kind, block)


def model_bytes(net: TinyNet) -> bytes:
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, *net.input_shape, net.num_classes, len(net.layers))]
    for spec, t in zip(net.layers, net.trainable):
        out.append(_LAYER.pack(_KIND_CODES[spec.kind], spec.block, int(t), *_layer_fields(spec)))
    for p in net.params:
        if p is not None:
            out.append(p["W"].astype("<f4").tobytes())
            out.append(p["b"].astype("<f4").tobytes())
    return b"".join(out)


def save_model(net: TinyNet, path) -> Path:
    """Write the versioned binary model file. 64-bit nets are stored at 32-bit."""
    path = Path(path)
    try:
        path.write_bytes(model_bytes(net))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    return path


def model_from_bytes(data: bytes) -> TinyNet:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not an obalex model file (bad magic)")
    if len(data) < _HEADER.size:
        raise IoError("model file truncated in header")
    _, version, c, h, w, classes, n_layers = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"model format version {version} (supported: {FORMAT_VERSION})")
    offset = _HEADER.size
    if len(data) < offset + n_layers * _LAYER.size:
        raise IoError("model file truncated in architecture table")
    layers, flags = [], []
    for _ in range(n_layers):
        code, block, t, *fields = _LAYER.unpack_from(data, offset)
        offset += _LAYER.size
        if code >= len(KINDS):
            raise IoError(f"unknown layer code {code}")
        layers.append(_layer_from_fields(KINDS[code], block, fields))
        flags.append(bool(t))
    params = []
    for spec in layers:
        if not spec.has_params:
            params.append(None)
            continue
        p = {}
        for key, shape in zip(("W", "b"), TinyNet._param_shapes(spec)):
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(data):
                raise IoError("model file truncated in parameter section")
            p[key] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
            offset = end
        params.append(p)
    if offset != len(data):
        raise IoError(f"{len(data) - offset} trailing bytes after parameters")
    try:
        net = TinyNet(layers, (c, h, w), classes, params=params)
    except (ShapeMismatch, ValueError) as exc:
        raise IoError(f"inconsistent architecture table: {exc}") from exc
    net.trainable = flags
    return net


def load_model(path) -> TinyNet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    return model_from_bytes(data)
