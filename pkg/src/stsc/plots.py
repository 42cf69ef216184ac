"""Plot-ready data series assembled from metrics files.

Rendering is left to the user's tooling; each figure becomes a JSON document
of labelled x/y series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .storage import MetricsRow, read_metrics


class PlotDataError(ValueError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    kind: str  # metrics row kind: "eval" or "round"
    channel: str | None
    series: tuple[str, ...]
    x: str
    y: str
    labels: tuple[str, ...] | None = None


def figure_spec(figure_id: str) -> FigureSpec:
    """Known figure ids: fig4-<ch>, fig6-stsc-<ch>, fig7-<ch>, fig8, fig9."""
    parts = figure_id.split("-")
    if parts[0] == "fig4" and len(parts) == 2:
        return FigureSpec("eval", parts[1], ("global",), "snr_db", "psnr_db", ("STSC",))
    if parts[0] == "fig7" and len(parts) == 2:
        return FigureSpec("eval", parts[1], ("global", "client0", "client1", "client2"), "snr_db", "psnr_db")
    if parts[0] == "fig6" and len(parts) == 3 and parts[1] == "stsc":
        return FigureSpec("round", parts[2], ("global",), "round", "mse")
    if figure_id == "fig8":
        return FigureSpec("round", "rician", ("iid", "noniid-mild", "noniid-severe"), "round", "mse",
                          ("IID", "Non-IID-Mild (alpha=1.0)", "Non-IID-Severe (alpha=0.1)"))
    if figure_id == "fig9":
        return FigureSpec("round", "rician", ("full", "partial"), "round", "psnr_eval",
                          ("K=3/3", "K=2/3"))
    raise PlotDataError(f"unknown figure id {figure_id!r}")


def _value(row: MetricsRow, name: str) -> float:
    if hasattr(row, name) and name != "extras":
        return float(getattr(row, name))
    if name in row.extras and row.extras[name] is not None:
        return float(row.extras[name])
    raise PlotDataError(f"row of series {row.extras.get('series')!r} has no field {name!r}")


def plot_data(rows: Iterable[MetricsRow], figure_id: str) -> dict:
    spec = figure_spec(figure_id)
    chosen: dict[str, dict[float, tuple[float, str]]] = {s: {} for s in spec.series}
    hashes: set[str] = set()
    for row in rows:
        if row.extras.get("kind") != spec.kind:
            continue
        if spec.channel is not None and row.channel != spec.channel:
            continue
        label = row.extras.get("series", row.experiment_id)
        if label not in chosen:
            continue
        # later rows for the same x replace earlier ones
        chosen[label][_value(row, spec.x)] = (_value(row, spec.y), row.extras.get("config_hash", ""))
    missing = [s for s, pts in chosen.items() if not pts]
    if missing:
        raise PlotDataError(f"figure {figure_id}: missing series {missing}")
    out_series = []
    for i, s in enumerate(spec.series):
        xs = sorted(chosen[s])
        for x in xs:
            if chosen[s][x][1]:
                hashes.add(chosen[s][x][1])
        out_series.append({
            "label": spec.labels[i] if spec.labels else s,
            "key": s,
            "x": xs,
            "y": [chosen[s][x][0] for x in xs],
        })
    return {"figure": figure_id, "x": spec.x, "y": spec.y, "series": out_series,
            "config_hashes": sorted(hashes)}


def write_plot_data(metrics_files: Sequence[str | Path], figure_id: str, out_path: str | Path) -> Path:
    rows: list[MetricsRow] = []
    for f in metrics_files:
        rows.extend(read_metrics(f))
    doc = plot_data(rows, figure_id)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out_path
