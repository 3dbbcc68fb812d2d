"""Summary figures for a pipeline run (PNG files, non-interactive backend)."""

from __future__ import annotations

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)


def decision_chart(decisions, path: str) -> None:
    """Stacked bars of symbolic and literal decisions per context."""
    counts: dict = {}
    for d in decisions.values():
        c = counts.setdefault(d.context, [0, 0])
        c[0 if d.symbolic else 1] += 1
    ctx = sorted(counts)
    sym = [counts[c][0] for c in ctx]
    lit = [counts[c][1] for c in ctx]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(ctx, sym, label="symbolic", color="#33658a")
    ax.bar(ctx, lit, bottom=sym, label="literal", color="#f6ae2d")
    ax.set_ylabel("decisions")
    ax.set_title("symbolization decisions by context")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def points_histogram(totals: dict, path: str, title: str) -> None:
    values = sorted(totals.values())
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if values:
        lo, hi = min(values), max(values)
        ax.hist(values, bins=range(lo, hi + 2), align="left", color="#86bbd8", edgecolor="black")
    ax.set_xlabel("total points")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_figures(result, directory: str) -> list:
    """Write the figures for a ``PipelineResult``; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    out = []
    p = os.path.join(directory, "decisions.png")
    decision_chart(result.symbols.decisions, p)
    out.append(p)
    p = os.path.join(directory, "block_points.png")
    points_histogram(result.layout.totals, p, "block candidate points")
    out.append(p)
    p = os.path.join(directory, "data_object_points.png")
    points_histogram({(c.addr, c.kind): c.total for c, _r in result.symbols.candidates}, p,
                     "data object candidate points")
    out.append(p)
    log.info("figures written to %s", directory)
    return out
