"""Parsing of evaluation report files.

Two formats exist.  CSV carries the fixed seven-column table; JSON wraps the
same rows with a metadata block (family, arch, seeds, fingerprint, ood_kind,
n_episodes).  Anything off-schema raises SchemaError naming the offending
column so a bad file points at its own defect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = (
    "k",
    "model_mse",
    "model_stderr",
    "zero_mse",
    "lsq_mse",
    "knn3_mse",
    "avg_mse",
)


class SchemaError(ValueError):
    """A report file does not match the emit_report contract."""


@dataclass(frozen=True)
class ReportData:
    """One parsed report: per-k series keyed by column name, plus metadata."""

    path: str
    k: np.ndarray  # (n,), int
    series: dict  # column name -> (n,) float array, excludes "k"
    metadata: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        """Legend label for the model curve, from metadata when present."""
        if "arch" in self.metadata:
            return str(self.metadata["arch"])
        return "model"

    @property
    def title(self) -> str:
        """Panel title: family plus distribution shift when known."""
        meta = self.metadata
        if "family" in meta:
            ood = meta.get("ood_kind", "")
            if ood and ood != "in-distribution":
                return f"{meta['family']} ({ood})"
            return str(meta["family"])
        stem = str(self.path).rsplit("/", 1)[-1]
        return stem.rsplit(".", 1)[0]


def _finish(path, ks, columns) -> ReportData:
    if not ks:
        raise SchemaError(f"{path}: report has no rows (empty k range)")
    return ReportData(
        path=str(path),
        k=np.array(ks, dtype=int),
        series={name: np.array(vals) for name, vals in columns.items()},
    )


def _parse_csv(path, text: str) -> ReportData:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        raise SchemaError(f"{path}: empty file")
    header = lines[0].split(",")
    for i, want in enumerate(CSV_COLUMNS):
        got = header[i] if i < len(header) else "<missing>"
        if got != want:
            raise SchemaError(f"{path}: column {i + 1} must be '{want}', got '{got}'")
    if len(header) > len(CSV_COLUMNS):
        raise SchemaError(f"{path}: unexpected extra column '{header[len(CSV_COLUMNS)]}'")
    ks: list[int] = []
    columns: dict[str, list[float]] = {name: [] for name in CSV_COLUMNS[1:]}
    for lineno, ln in enumerate(lines[1:], 2):
        cells = ln.split(",")
        if len(cells) != len(CSV_COLUMNS):
            raise SchemaError(
                f"{path}:{lineno}: expected {len(CSV_COLUMNS)} cells, got {len(cells)}"
            )
        for name, cell in zip(CSV_COLUMNS, cells):
            try:
                value = float(cell)
            except ValueError:
                raise SchemaError(
                    f"{path}:{lineno}: column '{name}' is not numeric: '{cell}'"
                ) from None
            if name == "k":
                ks.append(int(value))
            else:
                columns[name].append(value)
    return _finish(path, ks, columns)


def _parse_json(path, text: str) -> ReportData:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}: not valid JSON: {err}") from None
    if not isinstance(payload, dict) or "rows" not in payload:
        raise SchemaError(f"{path}: missing 'rows'")
    rows = payload["rows"]
    ks: list[int] = []
    columns: dict[str, list[float]] = {name: [] for name in CSV_COLUMNS[1:]}
    for i, row in enumerate(rows):
        for name in CSV_COLUMNS:
            if name not in row:
                raise SchemaError(f"{path}: rows[{i}] missing column '{name}'")
            if not isinstance(row[name], (int, float)) or isinstance(row[name], bool):
                raise SchemaError(
                    f"{path}: rows[{i}] column '{name}' is not numeric: {row[name]!r}"
                )
        for extra in set(row) - set(CSV_COLUMNS):
            raise SchemaError(f"{path}: rows[{i}] has unexpected column '{extra}'")
        ks.append(int(row["k"]))
        for name in CSV_COLUMNS[1:]:
            columns[name].append(float(row[name]))
    report = _finish(path, ks, columns)
    metadata = payload.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaError(f"{path}: metadata must be an object")
    return ReportData(path=report.path, k=report.k, series=report.series, metadata=metadata)


def load_report(path) -> ReportData:
    """Parse a .csv or .json report; other extensions are rejected."""
    text_path = str(path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise SchemaError(f"cannot read report {text_path}: {err}") from None
    if text_path.endswith(".csv"):
        return _parse_csv(text_path, text)
    if text_path.endswith(".json"):
        return _parse_json(text_path, text)
    raise SchemaError(f"{text_path}: unknown report extension (want .csv or .json)")
