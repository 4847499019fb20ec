"""Figures written next to the text reports.

Uses the object-oriented matplotlib API with the Agg canvas, so no
display or global pyplot state is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .ctc_core import PosteriorMatrix, SpikeSequence
from .eval_metrics import EvalReport
from .phrase_filter import FilterReport

RATE_NAMES = ("CER", "B-CER", "U-CER")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    return path


def plot_error_rates(reports: Mapping[str, EvalReport], path, title: str = "") -> Path:
    """Grouped bars of CER, B-CER and U-CER (in %) per system."""
    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.add_subplot()
    names = list(reports)
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(RATE_NAMES))
    for k, name in enumerate(names):
        r = reports[name]
        vals = [100 * v if np.isfinite(v) else np.nan for v in (r.cer, r.b_cer, r.u_cer)]
        bars = ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.bar_label(bars, fmt="%.1f", fontsize=7)
    ax.set_xticks(x, RATE_NAMES)
    ax.set_ylabel("error rate (%)")
    if title:
        ax.set_title(title)
    if len(names) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_posterior(post: PosteriorMatrix, spikes: SpikeSequence, path, max_tokens: int = 40) -> Path:
    """Heat map of frame posteriors with the detected spikes marked."""
    probs = np.exp(post.logp)
    shown = np.argsort(-probs.max(axis=0), kind="stable")[:max_tokens]
    shown = np.sort(shown)
    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot()
    im = ax.imshow(probs[:, shown].T, aspect="auto", origin="lower", cmap="viridis",
                   vmin=0.0, vmax=1.0, interpolation="nearest")
    row_of = {int(t): i for i, t in enumerate(shown)}
    xs = [s.frame for s in spikes if s.token in row_of]
    ys = [row_of[s.token] for s in spikes if s.token in row_of]
    ax.scatter(xs, ys, marker="x", color="red", s=18, label="spikes")
    ax.set_xlabel("frame")
    ax.set_ylabel("token (most active)")
    ax.set_yticks(range(len(shown)), [str(int(t)) for t in shown], fontsize=6)
    fig.colorbar(im, ax=ax, label="posterior")
    fig.tight_layout()
    return _save(fig, path)


def plot_filter_scores(report: FilterReport, q: float, path) -> Path:
    """PSC against SOC for every phrase, with the threshold drawn in."""
    fig = Figure(figsize=(4.8, 4.2))
    ax = fig.add_subplot()
    psc = np.array([s.psc for s in report.scores], dtype=float)
    soc = np.array([s.soc if s.soc is not None else np.nan for s in report.scores], dtype=float)
    kept = np.array([s.kept for s in report.scores], dtype=bool)
    lo = min(np.nanmin(np.where(np.isfinite(psc), psc, np.nan), initial=q), q) - 1
    psc = np.where(np.isfinite(psc), psc, lo)
    soc_plot = np.where(np.isnan(soc), lo, soc)
    ax.scatter(psc[kept], soc_plot[kept], s=14, label="kept")
    ax.scatter(psc[~kept], soc_plot[~kept], s=14, marker="x", label="filtered")
    ax.axvline(q, color="grey", lw=0.8, ls="--")
    ax.axhline(q, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("PSC")
    ax.set_ylabel("SOC (unscored at left/bottom)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
