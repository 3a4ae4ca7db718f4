"""Qualitative panels: ground truth next to predictions, occluded cells in gray."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import Category, MapElement, PerceptionRange  # noqa: E402
from .synth import MASK_CHANNEL  # noqa: E402

log = logging.getLogger(__name__)

CATEGORY_COLORS = {
    Category.BOUNDARY: "green",
    Category.DIVIDER: "orange",
    Category.PED_CROSSING: "blue",
}
OCCLUSION_GRAY = (0.6, 0.6, 0.6)
DPI = 100


def _plot_xy(points: np.ndarray, closed: bool):
    """Ego frame to plot frame: forward is up, left is left."""
    p = np.asarray(points)
    if closed:
        p = np.vstack([p, p[:1]])
    return -p[:, 1], p[:, 0]


def draw_elements(ax, elements: list[MapElement], linewidth: float = 2.0):
    for e in elements:
        h, v = _plot_xy(e.points, e.closed)
        ax.plot(h, v, color=CATEGORY_COLORS[e.category], linewidth=linewidth,
                solid_capstyle="butt", antialiased=False)


def draw_occlusion(ax, mask: np.ndarray | None, rng: PerceptionRange):
    if mask is None or not mask.any():
        return
    # mask is indexed [x, y]; rows map to decreasing forward distance on screen
    img = np.ones(mask.shape + (4,))
    img[..., :3] = OCCLUSION_GRAY
    img[..., 3] = np.where(mask > 0, 1.0, 0.0)
    img = img[::-1, ::-1]
    ax.imshow(img, extent=(-rng.y_max, -rng.y_min, rng.x_min, rng.x_max),
              interpolation="nearest", zorder=0)


def _setup_axes(ax, rng: PerceptionRange, title: str):
    ax.set_xlim(-rng.y_max, -rng.y_min)
    ax.set_ylim(rng.x_min, rng.x_max)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title, fontsize=9)


def render_frame(gt: list[MapElement], preds: list[MapElement] | None, mask: np.ndarray | None,
                 rng: PerceptionRange = PerceptionRange(), title: str = ""):
    """Two-panel figure (ground truth | prediction). Returns the Figure."""
    panel_h = 6.0
    panel_w = panel_h * rng.width / rng.length
    fig = plt.figure(figsize=(2 * panel_w + 0.6, panel_h + 0.6), dpi=DPI)
    axes = []
    for i, name in enumerate(("ground truth", "prediction")):
        left = (0.2 + i * (panel_w + 0.2)) / fig.get_figwidth()
        ax = fig.add_axes((left, 0.1 / fig.get_figheight(), panel_w / fig.get_figwidth(),
                           panel_h / fig.get_figheight()))
        _setup_axes(ax, rng, f"{title} {name}".strip())
        draw_occlusion(ax, mask, rng)
        axes.append(ax)
    draw_elements(axes[0], gt)
    draw_elements(axes[1], preds or [])
    return fig


def parse_frame_range(spec: str | None, n: int) -> list[int]:
    """``None`` -> all, ``"3"`` -> [3], ``"2:5"`` -> [2, 3, 4]."""
    if spec is None or spec == "":
        return list(range(n))
    if ":" in spec:
        a, b = spec.split(":", 1)
        return list(range(int(a) if a else 0, int(b) if b else n))
    return [int(spec)]


def render_files(prediction_records: list[dict] | None, frames, out_dir, frame_indices=None,
                 score_threshold: float = 0.4, rng: PerceptionRange = PerceptionRange()) -> list[Path]:
    """Write one PNG per requested frame; missing frames are skipped with a warning."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_frame = {f.frame_index: f for f in frames}
    preds = {r["frame_index"]: r for r in (prediction_records or [])}
    wanted = list(by_frame) if frame_indices is None else list(frame_indices)
    written = []
    for t in wanted:
        f = by_frame.get(t)
        if f is None:
            log.warning("frame %s not in sequence, skipping", t)
            continue
        rec = preds.get(t)
        if prediction_records and rec is None:
            log.warning("no predictions for frame %s, rendering ground truth only", t)
        els = [e for e in (rec["elements"] if rec else []) if e.confidence > score_threshold]
        grid = np.asarray(f.observation.grid)
        mask = grid[..., MASK_CHANNEL] if grid.ndim == 3 and grid.shape[-1] > MASK_CHANNEL else None
        mode = f" [{rec['mode']}]" if rec else ""
        fig = render_frame(f.gt_elements, els, mask, rng, f"{f.sequence_id} t={t}{mode}")
        path = out_dir / f"{f.sequence_id}_{t:04d}.png"
        fig.savefig(path, dpi=DPI)
        plt.close(fig)
        written.append(path)
    return written
