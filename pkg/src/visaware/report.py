"""Metrics log and matplotlib figures written next to it."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class MetricsLog:
    """JSON-lines records ``{stage, epoch, metric, value, seed}``; the file is rewritten per run."""

    def __init__(self, path, seed: int):
        self.path = Path(path)
        self.seed = seed
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self.records: list[dict] = []

    def write(self, stage: str, metric: str, value, epoch: int | None = None) -> dict:
        rec = {"stage": stage, "epoch": epoch, "metric": metric, "value": value, "seed": self.seed}
        self.records.append(rec)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _figure(width=5.0, height=3.4):
    fig, ax = plt.subplots(figsize=(width, height), dpi=120)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curve(series: dict[str, Sequence[tuple[float, float]]], path, xlabel="epoch", ylabel="loss",
               title=None) -> Path:
    """One line per named series of (x, y) points."""
    fig, ax = _figure()
    for label, points in series.items():
        if not points:
            continue
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    if len(series) > 1:
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_recall(recalls: dict[int, float], path, chance: dict[int, float] | None = None) -> Path:
    fig, ax = _figure()
    ks = sorted(recalls)
    ax.plot(ks, [recalls[k] for k in ks], marker="o", lw=1.2, label="recall@k")
    if chance:
        ax.plot(ks, [chance[k] for k in ks], ls="--", color="0.5", lw=1, label="chance")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("k")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)


def plot_bars(values: dict[str, float], path, ylabel="accuracy") -> Path:
    fig, ax = _figure(4.0, 3.2)
    names = list(values)
    ax.bar(names, [values[n] for n in names], color=["0.3", "0.65", "0.45", "0.8"][:len(names)], width=0.6)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.0)
    return _save(fig, path)


def series_from_records(records: Iterable[dict], stage: str, metric: str) -> list[tuple[float, float]]:
    return [(r["epoch"], r["value"]) for r in records
            if r["stage"] == stage and r["metric"] == metric and r["epoch"] is not None]
