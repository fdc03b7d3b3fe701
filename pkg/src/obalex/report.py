"""Render report.json files as text tables and accuracy/AvgScore line plots."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def runs_of(report: dict) -> dict[str, dict]:
    """A single-run report maps to ``{"run": report}``; a demo report lists its runs."""
    if "runs" in report:
        return dict(report["runs"])
    if "epochs" in report:
        return {"run": report}
    raise ValueError("report has neither 'epochs' nor 'runs'")


def _cell(v, width=10):
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.4f}"


def table(run: dict) -> str:
    names = sorted(run.get("explainers") or {k for e in run["epochs"] for k in e["avg_scores"]})
    header = f"{'epoch':>5} {'accuracy':>10} {'mean_loss':>10}" + "".join(f" {n[:12]:>12}" for n in names)
    lines = [header, "-" * len(header)]
    for e in run["epochs"]:
        scores = [None if e["avg_scores"].get(n) is None else e["avg_scores"][n]["avg_score"] for n in names]
        lines.append(f"{e['epoch']:>5} {_cell(e['accuracy'])} {_cell(e['mean_loss'])}"
                     + "".join(f" {_cell(s, 12)}" for s in scores))
    return "\n".join(lines)


def plot(run: dict, path, title: str = "") -> Path:
    epochs = [e["epoch"] for e in run["epochs"]]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.plot(epochs, [e["accuracy"] for e in run["epochs"]], marker="o", label="accuracy")
    left.set_xlabel("epoch")
    left.set_ylabel("accuracy")
    left.set_ylim(0.0, 1.05)
    losses = [e["mean_loss"] for e in run["epochs"]]
    if any(v is not None for v in losses):
        twin = left.twinx()
        twin.plot(epochs, losses, color="tab:red", linestyle="--", label="loss")
        twin.set_ylabel("mean loss (nats)")
    left.set_title("accuracy and loss")
    names = sorted({k for e in run["epochs"] for k in e["avg_scores"]})
    for n in names:
        vals = [None if e["avg_scores"].get(n) is None else e["avg_scores"][n]["avg_score"] for e in run["epochs"]]
        right.plot(epochs, [float("nan") if v is None else v for v in vals], marker="o", label=n)
    right.set_xlabel("epoch")
    right.set_ylabel("AvgScore")
    right.set_ylim(0.0, 1.05)
    right.set_title("AvgScore per explainer")
    if names:
        right.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def render(report_path, out_dir=None) -> tuple[str, list[Path]]:
    """Return the text tables and the written plot paths."""
    report_path = Path(report_path)
    report = json.loads(report_path.read_text())
    out = Path(out_dir) if out_dir is not None else report_path.parent
    out.mkdir(parents=True, exist_ok=True)
    texts, plots = [], []
    for name, run in runs_of(report).items():
        texts.append(f"== {name} ==\n{table(run)}")
        plots.append(plot(run, out / f"{name}_curves.png", title=name))
    return "\n\n".join(texts), plots
