"""Figures for the report paths of the CLI (headless Agg backend)."""

from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sibench(rows: Sequence[Dict[str, object]], path: str) -> str:
    """Throughput against table size, one line per mode."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_mode: Dict[str, List[tuple]] = {}
    for r in rows:
        by_mode.setdefault(str(r["mode"]), []).append((int(r["rows"]), float(r["throughput_tps"])))
    for mode, pts in sorted(by_mode.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xscale("log")
    ax.set_xlabel("table rows")
    ax.set_ylabel("committed txn/s")
    ax.set_title("SIBENCH throughput")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_latency(latencies: Sequence[float], path: str, title: str = "deferrable snapshot wait") -> str:
    """Empirical CDF of wait times."""
    fig, ax = plt.subplots(figsize=(6, 4))
    lat = sorted(latencies)
    if lat:
        ys = [(i + 1) / len(lat) for i in range(len(lat))]
        ax.step([x * 1000 for x in lat], ys, where="post")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("fraction of transactions")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_fuzz(reports: Sequence[Dict[str, object]], path: str) -> str:
    """Abort and false-positive rate per seed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    seeds = [r["seed"] for r in reports]
    ax.plot(seeds, [r["abort_rate"] for r in reports], marker=".", label="abort rate")
    ax.plot(seeds, [r["false_positive_rate"] for r in reports], marker=".",
            label="false-positive share of serialization aborts")
    cyc = [r["seed"] for r in reports if r.get("cycle")]
    if cyc:
        ax.scatter(cyc, [0] * len(cyc), color="red", marker="x", zorder=3, label="committed cycle")
    ax.set_xlabel("seed")
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
