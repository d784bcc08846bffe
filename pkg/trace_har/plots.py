"""
SVG figures for evaluation reports
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import matplotlib
import numpy as np

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _colors(labels: Sequence[str]) -> Dict[str, Any]:
    cmap = plt.get_cmap("tab20")
    return {label: cmap(i % cmap.N) for i, label in enumerate(labels)}


def plot_timeline_strip(
    pred_items: Iterable[Any],
    gt_items: Iterable[Any],
    path: PathLike,
    labels: Optional[Sequence[str]] = None,
    title: Optional[str] = None,
) -> Path:
    """Two-row strip: ground truth above, prediction below, one colour per label"""
    rows = [("Ground truth", [s for s in gt_items if s.label is not None]),
            ("Prediction", [s for s in pred_items if s.label is not None])]
    present = sorted({s.label for _, segments in rows for s in segments})
    labels = list(labels) if labels is not None else present
    colors = _colors(labels + [label for label in present if label not in labels])

    starts = [s.start for _, segments in rows for s in segments]
    origin = min(starts) if starts else None

    fig, ax = plt.subplots(figsize=(14, 2.8))
    for row, (_, segments) in enumerate(reversed(rows)):
        for segment in segments:
            left = (segment.start - origin).total_seconds() / 3600
            width = (segment.end - segment.start).total_seconds() / 3600
            ax.broken_barh([(left, width)], (row - 0.4, 0.8), facecolors=colors[segment.label])
    ax.set_yticks([0, 1])
    ax.set_yticklabels([name for name, _ in reversed(rows)])
    ax.set_xlabel(f"hours since {origin.isoformat()}" if origin else "hours")
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[label]) for label in present]
    if handles:
        ax.legend(handles, present, loc="upper center", bbox_to_anchor=(0.5, -0.35), ncol=min(6, len(present)), fontsize=8)
    if title:
        ax.set_title(title)

    path = Path(path)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote timeline strip plot to {path}")
    return path


def plot_short_segments(
    pred_distribution: Dict[int, float],
    gt_distribution: Dict[int, float],
    path: PathLike,
    title: Optional[str] = None,
) -> Path:
    """Grouped bars of the percentage of segments per short length"""
    lengths: List[int] = sorted(set(pred_distribution) | set(gt_distribution))
    x = np.arange(len(lengths))
    width = 0.4

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(x - width / 2, [gt_distribution.get(k, 0.0) for k in lengths], width, label="Ground truth")
    ax.bar(x + width / 2, [pred_distribution.get(k, 0.0) for k in lengths], width, label="Prediction")
    ax.set_xticks(x)
    ax.set_xticklabels([str(k) for k in lengths])
    ax.set_xlabel("segment length (units)")
    ax.set_ylabel("% of segments")
    ax.legend()
    if title:
        ax.set_title(title)

    path = Path(path)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info(f"Wrote short-segment histogram to {path}")
    return path
