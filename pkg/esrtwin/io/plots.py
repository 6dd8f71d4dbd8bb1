from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib import rc_context  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

logger = logging.getLogger(__name__)

# fixed ids and no timestamp: the same data gives the same bytes
SVG_RC = {"svg.hashsalt": "esrtwin", "svg.fonttype": "none", "font.size": 9}
SVG_METADATA = {"Date": None, "Creator": None}


def save_svg(fig: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    logger.debug("wrote %s", path)
    return path


Curve = Tuple[np.ndarray, np.ndarray]


def line_plot(
    path: Union[str, Path],
    curves: Dict[str, Curve],
    xlabel: str,
    ylabel: str,
    title: str = "",
    logx: bool = False,
    logy: bool = False,
    markers: bool = False,
    reference: Optional[Dict[str, Curve]] = None,
) -> Path:
    """One axis, an (x, y) curve per label; `reference` curves are drawn dashed."""
    with rc_context(SVG_RC):
        fig = Figure(figsize=(5.0, 3.5))
        ax = fig.add_subplot(1, 1, 1)
        style = "o-" if markers else "-"
        for label, (x, y) in curves.items():
            ax.plot(x, y, style, label=label, markersize=3)
        for label, (x, y) in (reference or {}).items():
            ax.plot(x, y, "--", label=label, color="0.4")
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(curves) + len(reference or {}) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return save_svg(fig, path)


def map_plot(
    path: Union[str, Path],
    xs: np.ndarray,
    ys: np.ndarray,
    values: np.ndarray,
    label: str,
    title: str = "",
    scale: float = 1e9,
    unit: str = "nm",
) -> Path:
    """Color map of a (len(ys), len(xs)) grid over the wire cross-section."""
    with rc_context(SVG_RC):
        fig = Figure(figsize=(5.0, 3.0))
        ax = fig.add_subplot(1, 1, 1)
        mesh = ax.pcolormesh(xs * scale, ys * scale, values, shading="auto", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label=label)
        ax.set_xlabel(f"x ({unit})")
        ax.set_ylabel(f"y ({unit})")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_svg(fig, path)


def histogram_plot(
    path: Union[str, Path],
    edges: np.ndarray,
    counts: np.ndarray,
    xlabel: str,
    ylabel: str = "donors",
    logx: bool = False,
) -> Path:
    with rc_context(SVG_RC):
        fig = Figure(figsize=(5.0, 3.5))
        ax = fig.add_subplot(1, 1, 1)
        ax.stairs(counts, edges, fill=True)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        return save_svg(fig, path)


def trace_plot(
    path: Union[str, Path],
    times: np.ndarray,
    quadratures: Dict[str, np.ndarray],
    windows: Sequence[Sequence[float]] = (),
) -> Path:
    """Time trace in microseconds with acquire windows shaded."""
    with rc_context(SVG_RC):
        fig = Figure(figsize=(6.0, 3.0))
        ax = fig.add_subplot(1, 1, 1)
        for label, y in quadratures.items():
            ax.plot(times * 1e6, y, label=label, linewidth=0.8)
        for t0, t1 in windows:
            ax.axvspan(t0 * 1e6, t1 * 1e6, color="0.9", zorder=0)
        ax.set_xlabel("t (us)")
        ax.set_ylabel("a_out (s^-1/2)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return save_svg(fig, path)
