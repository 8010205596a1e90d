"""Publication-style figures from icl-lab evaluation reports.

This package reads only the report files (CSV and JSON) that the training
package emits; it never imports that package.  The file format is the
interface.
"""

__version__ = "0.1.0"

from .figures import FigureSpec, build_figure, render_curves
from .reports import CSV_COLUMNS, ReportData, SchemaError, load_report

__all__ = [
    "CSV_COLUMNS",
    "FigureSpec",
    "ReportData",
    "SchemaError",
    "build_figure",
    "load_report",
    "render_curves",
]
