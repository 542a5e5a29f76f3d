"""Report generation: aggregate run CSVs into summary tables and PNG figures.

The report path is file-first: it scans a run directory for the CSVs the
pipeline commands emit (training curves, triplet-step logs, episode summaries,
confusion matrices), writes aggregated CSVs next to them, and renders the
matching matplotlib figures as PNG files. Nothing is interactive and no
timestamps are embedded, so identical runs produce identical reports.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def read_csv_rows(path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def plot_training_curves(curve_files: dict[str, Path], out_dir: Path) -> list[Path]:
    """Accuracy / train-loss / valid-loss figures across classifier runs."""
    out_paths = []
    series: dict[str, list[dict[str, str]]] = {
        name: read_csv_rows(p) for name, p in sorted(curve_files.items())
    }
    for column, title, fname in (
        ("accuracy", "validation accuracy", "curves_accuracy.png"),
        ("train_loss", "train loss", "curves_train_loss.png"),
        ("valid_loss", "validation loss", "curves_valid_loss.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, rows in series.items():
            epochs = [int(r["epoch"]) for r in rows]
            ax.plot(epochs, [float(r[column]) for r in rows], marker="o", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(title)
        ax.set_title(f"{title} over training")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        out_paths.append(path)
    return out_paths


def plot_triplet_log(trainlog_files: dict[str, Path], out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, path in sorted(trainlog_files.items()):
        rows = read_csv_rows(path)
        steps = [int(r["step"]) for r in rows]
        ax.plot(steps, [float(r["loss_total"]) for r in rows], label=f"{name} total", lw=0.8)
        ax.plot(steps, [float(r["loss_style"]) for r in rows], label=f"{name} style", lw=0.8)
        ax.plot(
            steps, [float(r["loss_triplet"]) for r in rows], label=f"{name} triplet", lw=0.8
        )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("triplet training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "triplet_training_loss.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_shot_accuracy(summary_rows: list[dict[str, str]], out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    models = sorted({r["model"] for r in summary_rows})
    for model in models:
        rows = sorted(
            (r for r in summary_rows if r["model"] == model), key=lambda r: int(r["shots"])
        )
        shots = [int(r["shots"]) for r in rows]
        means = [float(r["mean"]) for r in rows]
        stds = [float(r["std"]) for r in rows]
        ax.errorbar(shots, means, yerr=stds, marker="o", capsize=3, label=model)
    ax.set_xlabel("shots per class")
    ax.set_ylabel("episode accuracy")
    ax.set_title("few-shot accuracy by shot count")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "fewshot_accuracy.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_confusion(confusion_csv: Path, out_dir: Path, name: str) -> Path:
    with open(confusion_csv, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        classes = header[1:]
        mat = np.array([[int(v) for v in row[1:]] for row in reader])
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(mat, cmap="Blues")
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(classes)), classes, fontsize=8)
    for i in range(len(classes)):
        for j in range(len(classes)):
            ax.text(j, i, str(mat[i, j]), ha="center", va="center", fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"confusion matrix: {name}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    path = out_dir / f"confusion_{name}.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def generate_report(run_dir) -> list[Path]:
    """Aggregate everything found under ``run_dir`` into ``run_dir/report``."""
    run_dir = Path(run_dir)
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    # Few-shot summaries -> one combined table + comparison + figure.
    summary_rows: list[dict[str, str]] = []
    for path in sorted(run_dir.glob("eval/*_summary.csv")):
        summary_rows.extend(read_csv_rows(path))
    if summary_rows:
        combined = report_dir / "fewshot_summary.csv"
        with open(combined, "w", encoding="utf-8") as fh:
            fh.write("model,shots,mean,std\n")
            for r in summary_rows:
                fh.write(f"{r['model']},{r['shots']},{r['mean']},{r['std']}\n")
        written.append(combined)
        written.append(plot_shot_accuracy(summary_rows, report_dir))

        models = sorted({r["model"] for r in summary_rows})
        comparison = report_dir / "model_comparison.csv"
        with open(comparison, "w", encoding="utf-8") as fh:
            fh.write("model,best_shots,best_mean,best_std\n")
            for model in models:
                rows = [r for r in summary_rows if r["model"] == model]
                best = max(rows, key=lambda r: float(r["mean"]))
                fh.write(f"{model},{best['shots']},{best['mean']},{best['std']}\n")
        written.append(comparison)

    # Classifier curves (category net + baselines).
    curve_files = {p.stem.removesuffix("_curve"): p for p in sorted(run_dir.glob("**/*_curve.csv"))}
    if curve_files:
        written.extend(plot_training_curves(curve_files, report_dir))

    # Triplet-step logs.
    trainlogs = {p.parent.name: p for p in sorted(run_dir.glob("*/trainlog.csv"))}
    if trainlogs:
        written.append(plot_triplet_log(trainlogs, report_dir))

    # Confusion matrices.
    for path in sorted(run_dir.glob("**/*_confusion.csv")):
        written.append(plot_confusion(path, report_dir, path.stem.removesuffix("_confusion")))

    return written
