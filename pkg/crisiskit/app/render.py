from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape

_TEMPLATES = Path(__file__).parent / "templates"

_env = Environment(
    loader=FileSystemLoader(str(_TEMPLATES)),
    autoescape=select_autoescape(enabled_extensions=("svg.j2",), default_for_string=False),
    undefined=StrictUndefined,
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

# --- Text tables --------------------------------------------------------------

def _widths(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[int]:
    return [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]


def render_bench_table(rows: Sequence[Mapping[str, str]], batch_size: int) -> str:
    header = ["model", f"batch_{batch_size} (s)", "throughput (/s)", "speedup"]
    cells = [[r["tag"], r["spb"], r["tput"], r["delta"]] for r in rows]
    return _env.get_template("table.txt.j2").render(header=header, rows=cells, widths=_widths(header, cells))


def render_ro_table(rows: Sequence[Mapping[str, object]], region_label: str = "region") -> str:
    header = [region_label, "#requests", "#offers", "R/O"]
    cells = [[str(r["region"]), f"{r['requests']:,}", f"{r['offers']:,}", str(r["ratio"])] for r in rows]
    return _env.get_template("table.txt.j2").render(header=header, rows=cells, widths=_widths(header, cells))


# --- SVG line charts ----------------------------------------------------------

def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    exp = 10 ** math.floor(math.log10(v))
    for step in (1, 2, 2.5, 5, 10):
        if v <= step * exp:
            return step * exp
    return 10 * exp


def render_line_chart(
    title: str,
    x_labels: Sequence[str],
    series: Mapping[str, Sequence[Optional[float]]],
    y_label: str = "",
    width: int = 720,
    height: int = 360,
) -> str:
    """One polyline per series; NaN/None values break the line into segments."""
    left, right, top, bottom = 60, 150, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    finite = [v for vals in series.values() for v in vals if v is not None and math.isfinite(v)]
    y_max = _nice_max(max(finite) if finite else 0.0)
    n = len(x_labels)

    def x_at(i: int) -> float:
        return left + (plot_w * i / (n - 1) if n > 1 else plot_w / 2)

    def y_at(v: float) -> float:
        return top + plot_h * (1 - v / y_max)

    lines = []
    for k, (name, vals) in enumerate(series.items()):
        segments, current = [], []
        for i, v in enumerate(vals):
            if v is None or not math.isfinite(v):
                if current:
                    segments.append(current)
                current = []
                continue
            current.append(f"{x_at(i):.1f},{y_at(v):.1f}")
        if current:
            segments.append(current)
        lines.append({"name": name, "color": PALETTE[k % len(PALETTE)], "segments": [" ".join(s) for s in segments]})

    step = max(1, math.ceil(n / 12))
    ticks = [{"x": x_at(i), "label": x_labels[i]} for i in range(0, n, step)]
    y_ticks = [{"y": y_at(y_max * f), "label": f"{y_max * f:g}"} for f in (0, 0.25, 0.5, 0.75, 1.0)]
    return _env.get_template("line_chart.svg.j2").render(
        title=title,
        y_label=y_label,
        width=width,
        height=height,
        left=left,
        top=top,
        plot_w=plot_w,
        plot_h=plot_h,
        lines=lines,
        x_ticks=ticks,
        y_ticks=y_ticks,
    )


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
