"""Deterministic report writers: CSV tables, JSON summaries, SVG plots.

Every file starts with (or embeds) the artifact version and a hash of the
generating configuration, and contains nothing run-dependent beyond that, so
re-running the same configuration reproduces the outputs byte for byte.
CSV dialect: comma separated, '.' decimal point, LF line endings, mandatory
header row below one '#' metadata comment line.  Floats are written with
%.17g so values round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np

from . import __version__


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if math.isnan(xf):
        return "nan"
    return format(xf, ".17g")


def meta_line(hash_: str) -> str:
    return f"# viscoflow {__version__} config={hash_}"


def write_csv(path, header, rows, hash_: str):
    lines = [meta_line(hash_), ",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    """Read back a viscoflow CSV: returns (header, rows of floats-or-strings)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    body = [ln for ln in lines if not ln.startswith("#")]
    header = body[0].split(",")
    rows = []
    for ln in body[1:]:
        row = []
        for tok in ln.split(","):
            try:
                row.append(float(tok))
            except ValueError:
                row.append(tok)
        rows.append(row)
    return header, rows


def write_json(path, obj, hash_: str):
    payload = {"version": __version__, "config_hash": hash_}
    payload.update(obj)
    with open(path, "w", newline="") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return str(x)


def fit_rate(xs, es) -> float:
    """Least-squares slope of log(e) against log(x); nan when degenerate."""
    xs = np.asarray(xs, dtype=float)
    es = np.asarray(es, dtype=float)
    keep = (xs > 0) & (es > 0) & np.isfinite(es)
    if keep.sum() < 2:
        return float("nan")
    lx, le = np.log(xs[keep]), np.log(es[keep])
    slope = np.polyfit(lx, le, 1)[0]
    return float(slope)


def failed_marker(outdir, reason: str):
    with open(os.path.join(outdir, "FAILED"), "w") as fh:
        fh.write(reason + "\n")


# ---------------------------------------------------------------------------
# Minimal hand-rolled SVG (log-log line plot); CSV stays the ground truth
# ---------------------------------------------------------------------------

_PALETTE = ("#1f6fb2", "#c23b22", "#2e8540", "#7a4fa3", "#b58900", "#3aa6a6")


def svg_loglog(path, series, title, xlabel, ylabel, hash_: str):
    """series: list of (label, xs, ys); zero/negative points are dropped."""
    W, H, ml, mr, mt, mb = 640, 440, 70, 20, 40, 55
    pts = []
    for _, xs, ys in series:
        pts += [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0 and math.isfinite(y)]
    if not pts:
        pts = [(1e-1, 1e-1), (1.0, 1.0)]
    lx = [math.log10(p[0]) for p in pts]
    ly = [math.log10(p[1]) for p in pts]
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    x0, x1 = (x0 - 0.5, x1 + 0.5) if x0 == x1 else (x0, x1)
    y0, y1 = (y0 - 0.5, y1 + 0.5) if y0 == y1 else (y0, y1)

    def sx(v):
        return ml + (math.log10(v) - x0) / (x1 - x0) * (W - ml - mr)

    def sy(v):
        return H - mb - (math.log10(v) - y0) / (y1 - y0) * (H - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="monospace" font-size="12">',
        f"<!-- {meta_line(hash_)[2:]} -->",
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W/2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{W/2:.0f}" y="{H-12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{H/2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {H/2:.0f})">{ylabel}</text>',
        f'<rect x="{ml}" y="{mt}" width="{W-ml-mr}" height="{H-mt-mb}" '
        f'fill="none" stroke="#444"/>',
    ]
    for k in range(math.floor(x0), math.ceil(x1) + 1):
        if x0 <= k <= x1:
            px = sx(10.0**k)
            out.append(f'<line x1="{px:.1f}" y1="{mt}" x2="{px:.1f}" y2="{H-mb}" '
                       f'stroke="#ddd"/>')
            out.append(f'<text x="{px:.1f}" y="{H-mb+16}" text-anchor="middle">1e{k}</text>')
    for k in range(math.floor(y0), math.ceil(y1) + 1):
        if y0 <= k <= y1:
            py = sy(10.0**k)
            out.append(f'<line x1="{ml}" y1="{py:.1f}" x2="{W-mr}" y2="{py:.1f}" '
                       f'stroke="#ddd"/>')
            out.append(f'<text x="{ml-6}" y="{py+4:.1f}" text-anchor="end">1e{k}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        coords = [(sx(x), sy(y)) for x, y in zip(xs, ys)
                  if x > 0 and y > 0 and math.isfinite(y)]
        if len(coords) >= 2:
            path_d = " ".join(f"{'M' if j == 0 else 'L'}{cx:.1f},{cy:.1f}"
                              for j, (cx, cy) in enumerate(coords))
            out.append(f'<path d="{path_d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for cx, cy in coords:
            out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{W-mr-6}" y="{mt+16+14*i}" text-anchor="end" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(out) + "\n")
