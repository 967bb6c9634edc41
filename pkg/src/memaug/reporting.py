"""Report writers: key=value lines, CSV tables, and the matching figures.

Every command that emits a table or curve also renders a PNG next to the
delimited file, so runs are inspectable without extra tooling.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_kv(path: str, pairs) -> str:
    """Line-delimited key=value records; accepts dicts or (k, v) iterables."""
    items = pairs.items() if isinstance(pairs, dict) else pairs
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items:
            fh.write(f"{key}={value}\n")
    return path


def write_csv(path: str, header, rows) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def save_curve_png(path: str, curves: dict, xlabel: str = "step",
                   ylabel: str = "loss", title: str = "") -> str:
    """One line per named series."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, label=name, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bars_png(path: str, labels, values, ylabel: str = "",
                  title: str = "", errors=None) -> str:
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels) + 2), 4))
    x = range(len(labels))
    ax.bar(x, values, yerr=errors, capsize=3, color="#4878cf")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(l) for l in labels], rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
