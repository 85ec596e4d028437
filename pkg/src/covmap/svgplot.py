"""Minimal deterministic SVG box plots.

Hand-rolled on purpose: figures must regenerate byte-identically, so no
plotting library (font metrics, object ids and version strings all leak
into those outputs).  Coordinates are rounded to 1/100 px and printed
with the same 12-significant-digit formatter as every other writer.
"""

from __future__ import annotations

import numpy as np

from covmap.io import fmt12

__all__ = ["boxplot_svg"]

_FONT = 'font-family="sans-serif" font-size="11"'


def _c(v: float) -> str:
    """Pixel coordinate with stable formatting."""
    return fmt12(round(float(v), 2))


def _nice_step(span: float) -> float:
    raw = span / 4.0
    mag = 10.0 ** np.floor(np.log10(raw))
    for m in (1.0, 2.0, 5.0):
        if raw <= m * mag:
            return m * mag
    return 10.0 * mag


def _ticks(lo: float, hi: float) -> list[float]:
    step = _nice_step(hi - lo)
    first = np.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-9 * step:
        out.append(0.0 if abs(t) < 1e-12 * step else float(t))
        t += step
    return out


def _box_stats(v: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    lo, hi = inside.min(), inside.max()
    fliers = v[(v < lo) | (v > hi)]
    return {"q1": q1, "med": med, "q3": q3, "lo": lo, "hi": hi, "fliers": fliers}


def boxplot_svg(
    title: str,
    ylabel: str,
    labels: list[str],
    samples: list[np.ndarray],
    *,
    width: int = 480,
    height: int = 320,
) -> str:
    """Tukey box plot (1.5 IQR whiskers, outliers as circles), one box per label.

    NaNs are dropped per group; a group with no finite values keeps its
    axis slot but draws nothing.
    """
    if len(labels) != len(samples):
        raise ValueError("labels and samples must align")
    clean = [np.asarray(v, dtype=float) for v in samples]
    clean = [v[np.isfinite(v)] for v in clean]
    stats = [(_box_stats(v) if v.size else None) for v in clean]

    ml, mr, mt, mb = 56, 12, 28, 72
    px0, px1 = ml, width - mr
    py0, py1 = mt, height - mb

    finite = np.concatenate([v for v in clean if v.size] or [np.zeros(1)])
    lo, hi = float(finite.min()), float(finite.max())
    if hi - lo < 1e-12:
        pad = max(abs(hi), 1.0) * 0.1
        lo, hi = lo - pad, hi + pad
    else:
        pad = 0.05 * (hi - lo)
        lo, hi = lo - pad, hi + pad

    def ypix(v: float) -> float:
        return py1 - (v - lo) / (hi - lo) * (py1 - py0)

    n = len(labels)
    slot = (px1 - px0) / n
    half = 0.28 * slot

    out = []
    out.append('<?xml version="1.0" encoding="UTF-8"?>')
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    )
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(
        f'<text x="{_c(width / 2)}" y="18" text-anchor="middle" {_FONT} '
        f'font-weight="bold">{title}</text>'
    )
    out.append(
        f'<text x="14" y="{_c((py0 + py1) / 2)}" text-anchor="middle" {_FONT} '
        f'transform="rotate(-90 14 {_c((py0 + py1) / 2)})">{ylabel}</text>'
    )
    # frame + ticks
    out.append(
        f'<rect x="{px0}" y="{py0}" width="{px1 - px0}" height="{py1 - py0}" '
        f'fill="none" stroke="black"/>'
    )
    for t in _ticks(lo, hi):
        y = _c(ypix(t))
        out.append(f'<line x1="{px0 - 4}" y1="{y}" x2="{px0}" y2="{y}" stroke="black"/>')
        out.append(
            f'<text x="{px0 - 7}" y="{y}" dy="3.5" text-anchor="end" {_FONT}>'
            f"{fmt12(t)}</text>"
        )
    for i, label in enumerate(labels):
        cx = px0 + (i + 0.5) * slot
        tx, ty = _c(cx), py1 + 14
        out.append(
            f'<text x="{tx}" y="{ty}" text-anchor="end" {_FONT} '
            f'transform="rotate(-35 {tx} {ty})">{label}</text>'
        )
        st = stats[i]
        if st is None:
            continue
        xq0, xq1 = _c(cx - half), _c(cx + half)
        yq1, yq3 = ypix(st["q1"]), ypix(st["q3"])
        # whiskers first so the box overdraws them
        for v in (st["lo"], st["hi"]):
            yv = _c(ypix(v))
            out.append(
                f'<line x1="{_c(cx)}" y1="{_c(ypix(st["q1"] if v < st["med"] else st["q3"]))}" '
                f'x2="{_c(cx)}" y2="{yv}" stroke="black"/>'
            )
            out.append(
                f'<line x1="{_c(cx - half / 2)}" y1="{yv}" x2="{_c(cx + half / 2)}" '
                f'y2="{yv}" stroke="black"/>'
            )
        out.append(
            f'<rect x="{xq0}" y="{_c(yq3)}" width="{_c(2 * half)}" '
            f'height="{_c(yq1 - yq3)}" fill="#d9e6f2" stroke="black"/>'
        )
        ym = _c(ypix(st["med"]))
        out.append(f'<line x1="{xq0}" y1="{ym}" x2="{xq1}" y2="{ym}" stroke="black"/>')
        for f in np.sort(st["fliers"]):
            out.append(
                f'<circle cx="{_c(cx)}" cy="{_c(ypix(f))}" r="2.5" fill="none" '
                f'stroke="black"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
