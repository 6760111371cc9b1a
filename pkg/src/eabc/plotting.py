"""Minimal SVG time-series plots of a run log (polylines, no plotting library)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .harness import RunLog

WIDTH, HEIGHT = 720, 260
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 28, 36
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e")

# (file stem, title, y label, [(column, legend), ...])
PANELS = (
    ("position", "Rear position tracking", "s [m]", [("s", "s"), ("ref_s", "s_ref")]),
    ("steering", "Steering tracking", "delta [rad]", [("delta", "delta"), ("ref_delta", "delta_ref")]),
    ("roll", "Roll angle", "phi [rad]", [("phi", "phi"), ("eq_phi", "phi_e estimate")]),
    ("disturbance", "Disturbance and estimate", "[N m]",
     [("d_r", "d_r"), ("est_d_r", "d_r estimate"), ("d_phi", "d_phi"), ("est_d_phi", "d_phi estimate")]),
)


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def svg_timeseries(t: np.ndarray, series: list[tuple[str, np.ndarray]], title: str,
                   ylabel: str) -> str:
    t = np.asarray(t, dtype=float)
    finite = [y[np.isfinite(y)] for _, y in series]
    vals = np.concatenate(finite) if any(v.size for v in finite) else np.zeros(1)
    y_lo, y_hi = float(np.min(vals)), float(np.max(vals))
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    t_lo, t_hi = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def sx(v):
        return MARGIN_L + (v - t_lo) / (t_hi - t_lo) * pw

    def sy(v):
        return MARGIN_T + (y_hi - v) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for v in _ticks(t_lo, t_hi):
        out.append(f'<text x="{sx(v):.1f}" y="{HEIGHT - MARGIN_B + 14}" text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{MARGIN_L}" x2="{MARGIN_L + pw}" y1="{sy(v):.1f}" y2="{sy(v):.1f}" '
                   'stroke="#ddd"/>')
        out.append(f'<text x="{MARGIN_L - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2}" y="{HEIGHT - 4}" text-anchor="middle">t [s]</text>')
    out.append(f'<text x="12" y="{MARGIN_T + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 12 {MARGIN_T + ph / 2})">{escape(ylabel)}</text>')
    for i, (label, y) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        ok = np.isfinite(y)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(t[ok], np.asarray(y)[ok]))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = MARGIN_T + 12 + 14 * i
        out.append(f'<line x1="{MARGIN_L + 8}" x2="{MARGIN_L + 24}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{MARGIN_L + 28}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_run_plots(log: RunLog, directory: str | Path, prefix: str = "") -> list[Path]:
    """One SVG per panel; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, title, ylabel, cols in PANELS:
        series = [(legend, log.column(col)) for col, legend in cols]
        path = directory / f"{prefix}{stem}.svg"
        path.write_text(svg_timeseries(log.t, series, title, ylabel))
        paths.append(path)
    return paths
