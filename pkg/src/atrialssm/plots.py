"""Deterministic SVG rendering of evaluation and ECG artifacts.

The SVG is emitted as plain text with fixed number formatting, so the same
input always produces byte-identical output.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Union
from xml.sax.saxutils import escape

import numpy as np

from .ecg import LEADS, annotate, read_traces_csv

KINDS = ("generalization", "compactness", "traces")


class PlotError(ValueError):
    pass


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Svg:
    def __init__(self, width: float, height: float):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
            f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif" font-size="10">',
            f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0, cls=None, dash=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                          f'stroke="{stroke}" stroke-width="{_f(width)}"{extra}/>')

    def rect(self, x, y, w, h, fill="none", stroke="black"):
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}" stroke="{stroke}"/>')

    def circle(self, x, y, r=2.5, fill="black", cls=None):
        extra = f' class="{cls}"' if cls else ""
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"{extra}/>')

    def polyline(self, xs, ys, stroke="black", width=1.0):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{_f(width)}"/>')

    def text(self, x, y, s, anchor="middle", size=None):
        sz = f' font-size="{size}"' if size else ""
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}"{sz}>{escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _read_columns(path: Path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}
    except (OSError, IndexError, ValueError) as exc:
        raise PlotError(f"{path}: cannot parse artifact ({exc})") from None


def _need(cols: dict, names, path) -> None:
    missing = [n for n in names if n not in cols]
    if missing:
        raise PlotError(f"{path}: missing columns {missing}")


def render_compactness(values) -> str:
    """Cumulative explained variance against number of modes, y axis fixed to [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise PlotError("empty compactness curve")
    W, H, L, R, T, B = 420.0, 300.0, 50.0, 20.0, 20.0, 40.0
    pw, ph = W - L - R, H - T - B
    xs = L + (np.arange(v.size) / max(v.size - 1, 1)) * pw
    ys = T + (1.0 - np.clip(v, 0.0, 1.0)) * ph
    svg = _Svg(W, H)
    svg.line(L, T + ph, L + pw, T + ph)
    svg.line(L, T, L, T + ph)
    for y in (0.0, 0.25, 0.5, 0.75, 1.0):
        py = T + (1.0 - y) * ph
        svg.line(L - 4, py, L, py)
        svg.text(L - 6, py + 3, f"{y:g}", anchor="end")
    for k in range(v.size):
        svg.text(xs[k], T + ph + 14, str(k + 1))
    svg.text(L + pw / 2, H - 6, "number of modes")
    svg.text(12, T + ph / 2, "cumulative variance", anchor="middle")
    svg.polyline(xs, ys, stroke="#1f4e99", width=1.5)
    for x, y in zip(xs, ys):
        svg.circle(x, y, cls="point")
    return svg.render()


def render_generalization(cols: dict) -> str:
    """One box per left-out instance: quartile box, median, 1.5 IQR whiskers, p95 tick."""
    n = cols["median_mm"].size
    if n == 0:
        raise PlotError("empty generalization table")
    W, H, L, R, T, B = max(200.0, 60.0 + 28.0 * n), 300.0, 50.0, 10.0, 20.0, 40.0
    pw, ph = W - L - R, H - T - B
    top = float(max(cols["whisker_high_mm"].max(), cols["p95_mm"].max()))
    top = top * 1.05 if top > 0 else 1.0
    y = lambda v: T + (1.0 - v / top) * ph  # noqa: E731
    svg = _Svg(W, H)
    svg.line(L, T + ph, L + pw, T + ph)
    svg.line(L, T, L, T + ph)
    for k in range(5):
        val = top * k / 4
        svg.line(L - 4, y(val), L, y(val))
        svg.text(L - 6, y(val) + 3, f"{val:.2f}", anchor="end")
    step = pw / n
    for i in range(n):
        cx, hw = L + step * (i + 0.5), min(step * 0.3, 10.0)
        q1, q3, med = cols["q1_mm"][i], cols["q3_mm"][i], cols["median_mm"][i]
        lo, hi, p95 = cols["whisker_low_mm"][i], cols["whisker_high_mm"][i], cols["p95_mm"][i]
        svg.line(cx, y(lo), cx, y(q1))
        svg.line(cx, y(q3), cx, y(hi))
        svg.line(cx - hw / 2, y(lo), cx + hw / 2, y(lo))
        svg.line(cx - hw / 2, y(hi), cx + hw / 2, y(hi))
        svg.rect(cx - hw, y(q3), 2 * hw, max(y(q1) - y(q3), 0.0), fill="#dde6f5")
        svg.line(cx - hw, y(med), cx + hw, y(med), stroke="#b00000", width=1.5, cls="median")
        svg.line(cx - hw, y(p95), cx + hw, y(p95), stroke="gray", dash="2,2")
        svg.text(cx, T + ph + 14, str(i + 1))
    svg.text(L + pw / 2, H - 6, "left-out instance")
    svg.text(12, T + ph / 2, "mm")
    return svg.render()


def render_traces(traces, threshold_frac: float = 0.05) -> str:
    """12 panels; the earliest onset and latest offset over all leads are marked in red."""
    a = annotate(traces, threshold_frac)
    onset, offset = min(a.onset.values()), max(a.offset.values())
    t = a.times
    t0, t1 = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0
    peak = max(float(np.abs(v).max()) for v in a.leads.values()) or 1.0
    cols_n, rows_n, pw, ph, gap = 3, 4, 200.0, 90.0, 20.0
    W, H = cols_n * (pw + gap) + gap, rows_n * (ph + gap) + gap + 20.0
    svg = _Svg(W, H)
    for k, name in enumerate(LEADS):
        c, r = k % cols_n, k // cols_n
        x0, y0 = gap + c * (pw + gap), gap + r * (ph + gap)
        xs = lambda tt: x0 + (np.asarray(tt) - t0) / (t1 - t0) * pw  # noqa: E731
        svg.rect(x0, y0, pw, ph, stroke="#cccccc")
        svg.line(x0, y0 + ph / 2, x0 + pw, y0 + ph / 2, stroke="#e0e0e0")
        sig = a.leads[name]
        svg.polyline(xs(t), y0 + ph / 2 - sig / peak * (ph / 2 * 0.9))
        for tm, label in ((onset, "onset"), (offset, "offset")):
            svg.line(xs(tm), y0, xs(tm), y0 + ph, stroke="red", cls=label)
        svg.text(x0 + 4, y0 + 12, name, anchor="start")
    svg.text(W / 2, H - 8, f"time (ms); P-wave {offset - onset:.1f} ms (red: earliest onset {onset:.1f}, latest offset {offset:.1f})")
    return svg.render()


def plot(artifact: Union[str, Path], kind: str, out: Union[str, Path, None] = None) -> Path:
    """Render an artifact CSV to SVG next to it (or at `out`)."""
    if kind not in KINDS:
        raise PlotError(f"unknown plot kind {kind!r}; expected one of {', '.join(KINDS)}")
    artifact = Path(artifact)
    if kind == "compactness":
        cols = _read_columns(artifact)
        _need(cols, ["cumulative_variance"], artifact)
        text = render_compactness(cols["cumulative_variance"])
    elif kind == "generalization":
        cols = _read_columns(artifact)
        _need(cols, ["median_mm", "q1_mm", "q3_mm", "p95_mm", "whisker_low_mm", "whisker_high_mm"], artifact)
        text = render_generalization(cols)
    else:
        try:
            traces = read_traces_csv(artifact)
        except (OSError, IndexError, ValueError) as exc:
            raise PlotError(f"{artifact}: cannot parse artifact ({exc})") from None
        missing = [n for n in LEADS if n not in traces.leads]
        if missing:
            raise PlotError(f"{artifact}: missing leads {missing}")
        text = render_traces(traces)
    out = Path(out) if out is not None else artifact.with_suffix(".svg")
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(out)
    return out
