"""Deterministic table and figure emission for experiment results.

Tables are written as CSV and JSON side by side. Serialization is stable:
sorted JSON keys, fixed float formatting, no timestamps, so writing the same
rows twice produces byte-identical files. Figures are rendered with the Agg
backend straight to PNG.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .imaging import ImageGrid, clip_for_display

FLOAT_FORMAT = "{:.6f}"


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return FLOAT_FORMAT.format(value)
    return str(value)


def write_table(rows: list[dict], path, columns: list[str] | None = None) -> None:
    """Write rows as CSV with a fixed column order and float format."""
    if not rows:
        raise ConfigError(f"refusing to write empty table to {path}")
    if columns is None:
        columns = list(rows[0].keys())
        for row in rows[1:]:
            for key in row:
                if key not in columns:
                    columns.append(key)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(format_cell(row.get(col)) for col in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def emit_report(
    name: str,
    rows: list[dict],
    out_dir,
    *,
    columns: list[str] | None = None,
    metadata: dict | None = None,
) -> dict[str, str]:
    """Write <name>.csv and <name>.json under out_dir; returns the paths."""
    if not rows:
        raise ConfigError(f"report '{name}' has no rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    json_path = out_dir / f"{name}.json"
    write_table(rows, csv_path, columns)
    payload = {"name": name, "rows": rows}
    if metadata:
        payload["metadata"] = metadata
    write_json(payload, json_path)
    return {"csv": str(csv_path), "json": str(json_path)}


def plot_metric_curve(
    path,
    x_values,
    series: dict[str, list[float]],
    x_label: str,
    y_label: str,
    title: str | None = None,
    x_ticklabels: list[str] | None = None,
) -> None:
    """Line plot of one or more metric series over a shared x axis."""
    if not series:
        raise ConfigError("metric curve needs at least one series")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label in sorted(series):
        ax.plot(x_values, series[label], marker="o", label=label)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    if x_ticklabels is not None:
        ax.set_xticks(list(x_values))
        ax.set_xticklabels(x_ticklabels)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_panel_figure(path, panels: list[tuple[str, ImageGrid]], title: str | None = None) -> None:
    """Side-by-side grayscale panels with a label under each image."""
    if not panels:
        raise ConfigError("panel figure needs at least one image")
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (label, img) in zip(axes, panels):
        shown = clip_for_display(img)
        ax.imshow(np.asarray(shown.pixels), cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_axis_off()
        ax.set_title(label, fontsize=10)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
