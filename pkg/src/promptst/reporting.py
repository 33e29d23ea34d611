"""Aggregation of per-split results into tables (csv, markdown, json).

Cells hold mean/std over split values; markdown renders the usual
"91.0 (0.7)" percent form. Aggregation is insensitive to record order:
rows follow the canonical augmentation order, columns sort naturally on
their numeric parts.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .augment import KINDS


@dataclass
class CellStats:
    mean: float
    std: float
    n: int
    values: list

    @classmethod
    def from_values(cls, values) -> "CellStats":
        vals = [float(v) for v in values]
        if not vals:
            raise ValueError("cell has no values")
        return cls(mean=float(np.mean(vals)), std=float(np.std(vals)),
                   n=len(vals), values=vals)


@dataclass
class ResultTable:
    metric: str
    rows: list
    cols: list
    cells: dict = field(default_factory=dict)  # (row, col) -> CellStats
    warnings: list = field(default_factory=list)


def _natural_key(key: str) -> tuple:
    parts = []
    for piece in key.split("|"):
        for chunk in re.split(r"(\d+)", piece):
            parts.append(int(chunk) if chunk.isdigit() else chunk)
    return tuple(parts)


def _row_order(rows) -> list:
    canonical = [k for k in KINDS if k in rows]
    extra = sorted(r for r in rows if r not in KINDS)
    return canonical + extra


def aggregate(records: list) -> ResultTable:
    """Build a table from records of {"row", "col", "metric", "values"}."""
    if not records:
        raise ValueError("no records to aggregate")
    metrics = {r["metric"] for r in records}
    if len(metrics) != 1:
        raise ValueError(f"records mix metrics: {sorted(metrics)}")
    cells = {}
    warnings = []
    for r in records:
        key = (r["row"], r["col"])
        if key in cells:
            raise ValueError(f"duplicate cell {key}")
        stats = CellStats.from_values(r["values"])
        if stats.n == 1:
            warnings.append(
                f"cell {key[0]}|{key[1]} has a single value; std is 0")
        cells[key] = stats
    rows = _row_order({r for r, _ in cells})
    cols = sorted({c for _, c in cells}, key=_natural_key)
    return ResultTable(metric=next(iter(metrics)), rows=rows, cols=cols,
                       cells=cells, warnings=sorted(warnings))


def _fmt_cell(stats: CellStats, percent: bool) -> str:
    if percent:
        return f"{stats.mean * 100:.1f} ({stats.std * 100:.1f})"
    return f"{stats.mean:.4f} ({stats.std:.4f})"


def emit(table: ResultTable, fmt: str, path: str | None = None,
         percent: bool = True):
    """Render `table` as "csv", "markdown", or "json"; optionally write it.

    Returns the rendered string (or the dict, for json).
    """
    if fmt == "json":
        obj = {
            "metric": table.metric,
            "rows": list(table.rows),
            "cols": list(table.cols),
            "cells": {
                f"{r}|{c}": {"mean": s.mean, "std": s.std, "n": s.n,
                             "values": s.values}
                for (r, c), s in sorted(table.cells.items())
            },
            "warnings": list(table.warnings),
        }
        if path:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(obj, f, sort_keys=True, indent=2)
                f.write("\n")
        return obj
    if fmt == "csv":
        lines = ["row_key,col_key,mean,std,n"]
        for r in table.rows:
            for c in table.cols:
                s = table.cells.get((r, c))
                if s is not None:
                    lines.append(f"{r},{c},{s.mean!r},{s.std!r},{s.n}")
        text = "\n".join(lines) + "\n"
    elif fmt == "markdown":
        head = "| " + " | ".join([table.metric] + table.cols) + " |"
        sep = "|" + "---|" * (len(table.cols) + 1)
        lines = [head, sep]
        for r in table.rows:
            row = [r]
            for c in table.cols:
                s = table.cells.get((r, c))
                row.append(_fmt_cell(s, percent) if s is not None else "-")
            lines.append("| " + " | ".join(row) + " |")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


def table_from_json(obj: dict) -> ResultTable:
    cells = {}
    for key, s in obj["cells"].items():
        row, col = key.split("|", 1)
        cells[(row, col)] = CellStats(mean=s["mean"], std=s["std"],
                                      n=s["n"], values=list(s["values"]))
    return ResultTable(metric=obj["metric"], rows=list(obj["rows"]),
                       cols=list(obj["cols"]), cells=cells,
                       warnings=list(obj.get("warnings", [])))
