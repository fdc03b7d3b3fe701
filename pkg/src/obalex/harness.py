"""Desk-scale experiments: per-epoch accuracy, loss and AvgScore tracking.

One run trains a network epoch by epoch and, after each epoch, evaluates it
on the test split: accuracy and mean loss over every test image, AvgScore per
explainer over a capped sample of test images, counting only those the
network classifies correctly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, kernels
from .errors import EmptyDataset, EmptyExplanation, NoCorrectClassifications, ShapeMismatch
from .explainers import ExplainerConfig, explain
from .image_io import (
    ensure_dir,
    load_heatmap,
    read_dataset,
    render_overlay,
    resample_bilinear,
    save_heatmap,
    save_overlay,
)
from .metric import DatasetScore, ScoredImage, avg_score, normalize_explanation, score
from .synth import LabeledSample, SynthSpec, generate, mask_background
from .tinynet import TinyNet, TrainConfig, save_model, toy_vgg, train_epoch

log = logging.getLogger(__name__)

EVAL_SAMPLING = ("fixed", "per_epoch")


@dataclass
class ExperimentConfig:
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    dataset_dir: str | None = None
    train_fraction: float = 0.7
    strategy: str | None = "d"
    explainers: list[ExplainerConfig] = field(default_factory=lambda: [ExplainerConfig("occlusion")])
    eval_sample_cap: int = 50
    eval_sampling: str = "fixed"
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    # fewer correct eval images than this reports a null AvgScore
    min_correct: int = 5
    # output-layer-only epochs before strategy comparisons
    adapt_epochs: int = 10

    def __post_init__(self):
        if self.eval_sample_cap < 1:
            raise ValueError("eval_sample_cap must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.eval_sampling not in EVAL_SAMPLING:
            raise ValueError(f"eval_sampling must be one of {EVAL_SAMPLING}")
        names = [e.name for e in self.explainers]
        if len(set(names)) != len(names):
            raise ValueError(f"explainer methods must be unique, got {names}")
        if (self.synth is None) == (self.dataset_dir is None):
            raise ValueError("give exactly one of synth or dataset_dir")

    def to_dict(self) -> dict:
        return {
            "synth": None if self.synth is None else self.synth.to_dict(),
            "dataset_dir": self.dataset_dir,
            "train_fraction": self.train_fraction,
            "strategy": self.strategy,
            "explainers": [e.to_dict() for e in self.explainers],
            "eval_sample_cap": self.eval_sample_cap,
            "eval_sampling": self.eval_sampling,
            "train": asdict(self.train),
            "seed": self.seed,
            "min_correct": self.min_correct,
            "adapt_epochs": self.adapt_epochs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "synth" in data and data["synth"] is not None:
            data["synth"] = SynthSpec.from_dict(data["synth"])
        if data.get("dataset_dir") is not None and "synth" not in data:
            data["synth"] = None
        if "explainers" in data:
            data["explainers"] = [ExplainerConfig.from_dict(e) for e in data["explainers"]]
        if "train" in data:
            data["train"] = TrainConfig(**data["train"])
        return cls(**data)

    def load_samples(self) -> list[LabeledSample]:
        if self.synth is not None:
            return generate(self.synth)
        return read_dataset(self.dataset_dir)


@dataclass
class EpochReport:
    epoch: int
    accuracy: float | None
    mean_loss: float | None
    avg_scores: dict[str, DatasetScore | None]
    eval_sample_ids: list[str]
    train_loss: float | None = None
    train_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "avg_scores": {k: None if v is None else v.to_dict() for k, v in self.avg_scores.items()},
            "eval_sample_ids": list(self.eval_sample_ids),
        }


@dataclass
class ExperimentResult:
    reports: list[EpochReport]
    model: TinyNet | None
    config: ExperimentConfig
    files: list[Path] = field(default_factory=list)
    # per explainer: image id -> ExplanationMap, from the final evaluation
    explanations: dict = field(default_factory=dict)


def worker_count() -> int:
    """Worker threads from ``OBALEX_THREADS`` (0 or unset = one per CPU)."""
    try:
        n = int(os.environ.get("OBALEX_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def split(samples: Sequence[LabeledSample], train_fraction: float, seed: int):
    """Seeded shuffle, then the first ``floor(fraction * n)`` samples train."""
    if not samples:
        raise EmptyDataset("dataset is empty")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = min(max(int(train_fraction * len(samples)), 1), len(samples) - 1)
    if n_train < 1:
        raise EmptyDataset("need at least two samples to split")
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def choose_eval(test: Sequence[LabeledSample], cap: int, rng) -> list[LabeledSample]:
    k = min(cap, len(test))
    picked = rng.choice(len(test), size=k, replace=False)
    return sorted((test[i] for i in picked), key=lambda s: s.image_id)


def _arrays(samples):
    return (np.array([s.image.values for s in samples]), np.array([s.label for s in samples], dtype=np.int64))


def split_metrics(net: TinyNet, samples, batch_size: int = 64) -> tuple[float, float]:
    """Accuracy and mean cross-entropy over ``samples``."""
    x, y = _arrays(samples)
    correct = 0
    loss = 0.0
    for start in range(0, len(x), batch_size):
        probs = net.predict_proba(x[start:start + batch_size])
        yy = y[start:start + batch_size]
        correct += int((probs.argmax(axis=1) == yy).sum())
        p = np.maximum(probs[np.arange(len(yy)), yy], np.finfo(np.float64).tiny)
        loss += float(-np.log(p).sum())
    return correct / len(x), loss / len(x)


def _explain_one(net, sample, explainers, predicted):
    out = {}
    for cfg in explainers:
        try:
            out[cfg.name] = explain(net, sample.image, predicted, cfg)
        except EmptyExplanation:
            out[cfg.name] = None
    return out


def score_samples(net: TinyNet, samples, explainers: Sequence[ExplainerConfig], min_correct: int = 5):
    """AvgScore per explainer over ``samples``; only correct predictions count.

    Returns ``(avg_scores, explanations)``. An image whose explanation is
    empty cannot be scored and is left out of that explainer's mean.
    """
    x, y = _arrays(samples)
    predicted = net.predict_proba(x).argmax(axis=1) if len(samples) else np.zeros(0, dtype=int)
    correct = predicted == y
    jobs = [(s, int(p)) for s, p, c in zip(samples, predicted, correct) if c]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(lambda job: _explain_one(net, job[0], explainers, job[1]), jobs))
    by_id = {s.image_id: r for (s, _), r in zip(jobs, results)}
    avg_scores, explanations = {}, {}
    for cfg in explainers:
        scored, maps = [], {}
        for s, ok in zip(samples, correct):
            expl = by_id.get(s.image_id, {}).get(cfg.name)
            if ok and expl is None:
                log.warning("%s: empty %s explanation, image not scored", s.image_id, cfg.name)
                continue
            if ok:
                maps[s.image_id] = expl
            scored.append(ScoredImage(s.image_id, score(s.mask, expl) if ok else 0.0, bool(ok)))
        avg_scores[cfg.name] = _aggregate(scored, min_correct, cfg.name)
        explanations[cfg.name] = maps
    return avg_scores, explanations


def _aggregate(scored, min_correct, name) -> DatasetScore | None:
    try:
        result = avg_score(scored)
    except NoCorrectClassifications:
        log.warning("%s: no correctly classified eval images, AvgScore is null", name)
        return None
    if result.n_correct < min_correct:
        log.warning("%s: only %d correct eval images (< %d), AvgScore is null",
                    name, result.n_correct, min_correct)
        return None
    return result


def run_experiment(config: ExperimentConfig, samples=None, net: TinyNet | None = None,
                   train_transform: Callable | None = None, out_dir=None) -> ExperimentResult:
    """Train for ``config.train.epochs`` epochs, evaluating after each one.

    ``train_transform(sample, index)`` rewrites training samples (used for
    masked-background training); test samples are never transformed.
    """
    samples = config.load_samples() if samples is None else samples
    train_set, test_set = split(samples, config.train_fraction, config.seed)
    if train_transform is not None:
        train_set = [train_transform(s, i) for i, s in enumerate(train_set)]
    if net is None:
        shape = train_set[0].image.values.shape
        n_classes = max(s.label for s in samples) + 1
        net = toy_vgg(shape, num_classes=max(n_classes, 2), seed=config.seed)
    else:
        net = net.clone()
    if config.strategy is not None:
        net.set_strategy(config.strategy)
    x, y = _arrays(train_set)
    shuffle_rng = np.random.default_rng(config.train.seed)
    eval_rng = np.random.default_rng([config.seed, 1])
    eval_set = choose_eval(test_set, config.eval_sample_cap, eval_rng)
    reports = []
    explanations = {}
    for epoch in range(1, config.train.epochs + 1):
        train_loss, train_acc = train_epoch(net, x, y, config.train, shuffle_rng)
        if config.eval_sampling == "per_epoch" and epoch > 1:
            eval_set = choose_eval(test_set, config.eval_sample_cap, eval_rng)
        acc, loss = split_metrics(net, test_set)
        avg, explanations = score_samples(net, eval_set, config.explainers, config.min_correct)
        reports.append(EpochReport(epoch, acc, loss, avg, [s.image_id for s in eval_set], train_loss, train_acc))
        log.info("epoch %d: accuracy %.3f loss %.4f %s", epoch, acc, loss,
                 {k: None if v is None else round(v.avg_score, 4) for k, v in avg.items()})
    result = ExperimentResult(reports, net, config, explanations=explanations)
    if out_dir is not None:
        result.files = write_run(result, out_dir, {s.image_id: s for s in eval_set})
    return result


# -- reports --

def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def csv_text(reports: Sequence[EpochReport], names: Sequence[str], prefix: dict | None = None) -> str:
    """``epoch,accuracy,mean_loss,<name>_avgscore,...``; null values are empty cells."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    lead = list(prefix) if prefix else []
    writer.writerow(lead + ["epoch", "accuracy", "mean_loss"] + [f"{n}_avgscore" for n in names])
    for r in reports:
        scores = [None if r.avg_scores[n] is None else r.avg_scores[n].avg_score for n in names]
        writer.writerow(list(prefix.values() if prefix else []) + [r.epoch, _fmt(r.accuracy), _fmt(r.mean_loss)]
                        + [_fmt(s) for s in scores])
    return buf.getvalue()


def explainer_hyperparameters(explainers, image_side: int) -> dict:
    return {e.name: e.resolved(image_side).to_dict() for e in explainers}


def report_dict(reports, config_echo: dict, explainers, image_side: int) -> dict:
    return {
        "toolkit_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": config_echo,
        "explainers": explainer_hyperparameters(explainers, image_side),
        "epochs": [r.to_dict() for r in reports],
    }


def dump_json(data, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_run(result: ExperimentResult, out_dir, eval_samples: dict) -> list[Path]:
    """report.json, report.csv, model.oblx, final-epoch heatmaps and overlays."""
    out = ensure_dir(out_dir)
    names = [e.name for e in result.config.explainers]
    side = result.model.input_shape[1]
    files = [
        dump_json(report_dict(result.reports, result.config.to_dict(), result.config.explainers, side),
                  out / "report.json"),
    ]
    (out / "report.csv").write_text(csv_text(result.reports, names))
    files.append(out / "report.csv")
    files.append(save_model(result.model, out / "model.oblx"))
    files += write_explanations(result.explanations, eval_samples, out)
    return files


def write_explanations(explanations: dict, samples: dict, out: Path) -> list[Path]:
    files = []
    for name, maps in explanations.items():
        hdir = ensure_dir(out / "heatmaps" / name)
        odir = ensure_dir(out / "overlays" / name)
        for image_id in sorted(maps):
            expl = maps[image_id]
            sample = samples[image_id]
            s = score(sample.mask, expl)
            save_heatmap(hdir / f"{image_id}.png", expl.values, image_id)
            save_overlay(odir / f"{image_id}.png", render_overlay(sample.image, expl, sample.mask, s))
            files += [hdir / f"{image_id}.png", hdir / f"{image_id}.json", odir / f"{image_id}.png"]
    return files


# -- strategy and background comparisons --

def adapt(net: TinyNet, samples, config: ExperimentConfig, epochs: int | None = None) -> TinyNet:
    """Adaptation phase: train only the output layer on the training split."""
    epochs = config.adapt_epochs if epochs is None else epochs
    train_set, _ = split(samples, config.train_fraction, config.seed)
    net = net.clone().set_output_only()
    x, y = _arrays(train_set)
    rng = np.random.default_rng([config.train.seed, 2])
    for _ in range(epochs):
        train_epoch(net, x, y, config.train, rng)
    return net


def compare_strategies(base_net: TinyNet, samples, strategies: Sequence[str], config: ExperimentConfig,
                       out_dir=None) -> dict[str, ExperimentResult]:
    """One run per freezing strategy, each starting from a clone of ``base_net``."""
    results = {}
    for strategy in strategies:
        cfg = ExperimentConfig(**{**config.__dict__, "strategy": strategy})
        sub = None if out_dir is None else Path(out_dir) / f"strategy_{strategy}"
        results[strategy] = run_experiment(cfg, samples, net=base_net, out_dir=sub)
    if out_dir is not None:
        _write_paired(results, "strategy", config, Path(out_dir) / "strategies.csv")
    return results


def masking_transform(seed: int) -> Callable:
    def transform(sample: LabeledSample, index: int) -> LabeledSample:
        sub_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        return mask_background(sample, sub_seed)
    return transform


def compare_masked_background(samples, config: ExperimentConfig, net: TinyNet | None = None,
                              out_dir=None) -> dict[str, ExperimentResult]:
    """Train on original images and on background-masked images, test on originals."""
    results = {}
    for variant, transform in (("original", None), ("masked", masking_transform(config.seed))):
        sub = None if out_dir is None else Path(out_dir) / f"background_{variant}"
        results[variant] = run_experiment(config, samples, net=net, train_transform=transform, out_dir=sub)
    if out_dir is not None:
        _write_paired(results, "variant", config, Path(out_dir) / "masked_background.csv")
    return results


def _write_paired(results: dict, key: str, config, path: Path) -> Path:
    names = [e.name for e in config.explainers]
    parts = []
    for i, (label, res) in enumerate(results.items()):
        text = csv_text(res.reports, names, prefix={key: label})
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    path.write_text("".join(parts))
    return path


# -- evaluation of an existing model or precomputed heatmaps --

def evaluate_dataset(samples, explainers: Sequence[ExplainerConfig], net: TinyNet | None = None,
                     predictions: dict | None = None, heatmaps_dir=None, eval_sample_cap: int = 50,
                     seed: int = 0, min_correct: int = 5):
    """Single evaluation pass, reported as epoch 0.

    Correctness comes from ``net`` or, failing that, from ``predictions``
    (image id -> predicted label). With ``heatmaps_dir`` the explanations are
    read from ``<heatmaps_dir>/<method>/<id>.png`` instead of computed.
    Returns ``(EpochReport, explanations, eval_samples)``.
    """
    if not samples:
        raise EmptyDataset("dataset is empty")
    if net is None and predictions is None:
        raise ValueError("need a model or a predictions table")
    eval_set = choose_eval(samples, eval_sample_cap, np.random.default_rng([seed, 1]))
    if net is not None:
        accuracy, loss = split_metrics(net, samples)
        x, _ = _arrays(eval_set)
        predicted = dict(zip((s.image_id for s in eval_set), net.predict_proba(x).argmax(axis=1).tolist()))
    else:
        missing = [s.image_id for s in samples if s.image_id not in predictions]
        if missing:
            raise ValueError(f"predictions missing for {missing[:5]}")
        accuracy = sum(predictions[s.image_id] == s.label for s in samples) / len(samples)
        loss = None
        predicted = {s.image_id: predictions[s.image_id] for s in eval_set}
    avg_scores, explanations = {}, {}
    for cfg in explainers:
        scored, maps = [], {}
        for s in eval_set:
            ok = predicted[s.image_id] == s.label
            if not ok:
                scored.append(ScoredImage(s.image_id, 0.0, False))
                continue
            if heatmaps_dir is not None:
                raw, _ = load_heatmap(Path(heatmaps_dir) / cfg.name / f"{s.image_id}.png")
                if raw.shape != s.mask.shape:
                    raw = resample_bilinear(raw, *s.mask.shape)
                expl = normalize_explanation(raw)
            else:
                try:
                    expl = explain(net, s.image, predicted[s.image_id], cfg)
                except EmptyExplanation:
                    expl = None
            if expl is None or expl.is_empty:
                log.warning("%s: empty %s explanation, image not scored", s.image_id, cfg.name)
                continue
            if expl.shape != s.mask.shape:
                raise ShapeMismatch(f"{s.image_id}: explanation {expl.shape} vs mask {s.mask.shape}")
            maps[s.image_id] = expl
            scored.append(ScoredImage(s.image_id, score(s.mask, expl), True))
        avg_scores[cfg.name] = _aggregate(scored, min_correct, cfg.name)
        explanations[cfg.name] = maps
    report = EpochReport(0, accuracy, loss, avg_scores, [s.image_id for s in eval_set])
    return report, explanations, eval_set


def train_demo(config: ExperimentConfig, strategies: Sequence[str] = ("a", "b"),
               masked_background: bool = True, out_dir=None) -> dict[str, ExperimentResult]:
    """Adaptation phase, strategy comparison and masked-background comparison in one go.

    Writes per-run directories plus a combined ``report.json`` and
    ``report.csv`` (with a leading ``run`` column) under ``out_dir``.
    """
    samples = config.load_samples()
    runs: dict[str, ExperimentResult] = {}
    out = None if out_dir is None else ensure_dir(out_dir)
    if strategies:
        shape = samples[0].image.values.shape
        base = toy_vgg(shape, num_classes=max(2, max(s.label for s in samples) + 1), seed=config.seed)
        base = adapt(base, samples, config)
        if out is not None:
            save_model(base, out / "base_model.oblx")
        for strategy, res in compare_strategies(base, samples, strategies, config, out).items():
            runs[f"strategy_{strategy}"] = res
    if masked_background:
        for variant, res in compare_masked_background(samples, config, out_dir=out).items():
            runs[f"background_{variant}"] = res
    if out is not None:
        side = samples[0].image.values.shape[1]
        combined = {
            "toolkit_version": __version__,
            "kernel_backend": kernels.BACKEND,
            "config": {**config.to_dict(), "strategies": list(strategies), "masked_background": masked_background},
            "runs": {name: report_dict(r.reports, r.config.to_dict(), r.config.explainers, side)
                     for name, r in runs.items()},
        }
        dump_json(combined, out / "report.json")
        names = [e.name for e in config.explainers]
        parts = []
        for i, (name, r) in enumerate(runs.items()):
            text = csv_text(r.reports, names, prefix={"run": name})
            parts.append(text if i == 0 else text.split("\n", 1)[1])
        (out / "report.csv").write_text("".join(parts))
    return runs
