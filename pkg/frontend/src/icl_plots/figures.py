"""Figure construction: MSE vs context length, one panel per report.

A FigureSpec binds report files to a rows-by-cols panel grid; render_curves
materializes it as PNG plus SVG.  Rendering is read-only over the reports and
deterministic: fixed figure geometry, no timestamps in the output metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "icl-lab-plots"  # deterministic SVG ids

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .reports import ReportData, load_report  # noqa: E402

# baseline toggle name -> (report column, legend label, line style)
BASELINES = {
    "zero": ("zero_mse", "zero", ":"),
    "least_squares": ("lsq_mse", "least squares", "--"),
    "knn3": ("knn3_mse", "3-NN", "-."),
    "averaging": ("avg_mse", "averaging", ":"),
}

_PANEL_WIDTH = 4.0
_PANEL_HEIGHT = 3.0


@dataclass(frozen=True)
class FigureSpec:
    """Reports plus layout; construction validates files and geometry."""

    report_paths: tuple
    rows: int
    cols: int
    titles: tuple | None = None
    logy: bool = False
    baselines: tuple = ("zero", "least_squares")
    name: str = "figure"
    dpi: int = 100
    reports: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.report_paths:
            raise ValueError("FigureSpec needs at least one report")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"layout must be positive, got {self.rows}x{self.cols}")
        if self.rows * self.cols < len(self.report_paths):
            raise ValueError(
                f"{len(self.report_paths)} reports do not fit a "
                f"{self.rows}x{self.cols} grid"
            )
        if self.titles is not None and len(self.titles) != len(self.report_paths):
            raise ValueError(
                f"{len(self.titles)} titles for {len(self.report_paths)} reports"
            )
        for toggle in self.baselines:
            if toggle not in BASELINES:
                raise ValueError(
                    f"unknown baseline '{toggle}' (have {sorted(BASELINES)})"
                )
        # every referenced report must exist and parse before any drawing
        object.__setattr__(
            self, "reports", tuple(load_report(p) for p in self.report_paths)
        )


def _draw_panel(ax, report: ReportData, spec: FigureSpec, title: str) -> None:
    k = report.k
    mse = report.series["model_mse"]
    err = report.series["model_stderr"]
    ax.plot(k, mse, "-o", markersize=3, label=report.label, zorder=3)
    ax.fill_between(k, mse - err, mse + err, alpha=0.25, linewidth=0, zorder=2)
    for toggle in spec.baselines:
        column, label, style = BASELINES[toggle]
        ax.plot(k, report.series[column], style, label=label, zorder=1)
    if spec.logy:
        ax.set_yscale("log")
    ax.set_xlabel("in-context examples")
    ax.set_ylabel("MSE")
    ax.set_title(title)
    ax.legend(fontsize=8)


def build_figure(spec: FigureSpec):
    """(figure, used axes): one panel per report, extras switched off."""
    fig, axes = plt.subplots(
        spec.rows,
        spec.cols,
        figsize=(_PANEL_WIDTH * spec.cols, _PANEL_HEIGHT * spec.rows),
        squeeze=False,
    )
    flat = axes.ravel()
    for i, report in enumerate(spec.reports):
        title = spec.titles[i] if spec.titles is not None else report.title
        _draw_panel(flat[i], report, spec, title)
    for ax in flat[len(spec.reports):]:
        ax.set_axis_off()
    fig.tight_layout()
    return fig, flat[: len(spec.reports)]


def render_curves(spec: FigureSpec, out_dir: str = ".") -> list[str]:
    """Write <name>.png and <name>.svg under out_dir; return the paths."""
    fig, _ = build_figure(spec)
    written = []
    try:
        for ext in ("png", "svg"):
            path = f"{out_dir}/{spec.name}.{ext}"
            fig.savefig(path, dpi=spec.dpi, metadata={"Date": None})
            written.append(path)
    finally:
        plt.close(fig)
    return written


def series_on_axes(ax) -> dict[str, np.ndarray]:
    """Plotted (label -> y data) pairs, for verification against the files."""
    return {line.get_label(): np.asarray(line.get_ydata()) for line in ax.lines}
