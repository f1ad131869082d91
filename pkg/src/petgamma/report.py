"""CSV tables and minimal SVG log-log charts."""
import csv
import math
import warnings
from pathlib import Path

import numpy as np


def fmt(v):
    """Shortest round-trip text for floats, plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])
    return path


def read_csv(path):
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def write_listmode(path, events):
    """Events as ``t,alpha_a,alpha_b`` rows with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        f.write("t,alpha_a,alpha_b\n")
        for t, a, b in np.asarray(events, dtype=float).reshape(-1, 3):
            f.write(f"{t:.17g},{a:.17g},{b:.17g}\n")
    return path


def read_listmode(path):
    with warnings.catch_warnings():
        # a run without events is a valid header-only file
        warnings.simplefilter("ignore", UserWarning)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, 3)


def write_density(path, slices):
    """Spacetime density as CSV: one row per (slice, i) with the cells along j."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = np.asarray(slices, dtype=float)
    with path.open("w", newline="") as f:
        f.write("slice,i," + ",".join(f"c{j}" for j in range(s.shape[2])) + "\n")
        for k in range(s.shape[0]):
            for i in range(s.shape[1]):
                f.write(f"{k},{i}," + ",".join(f"{v:.17g}" for v in s[k, i]) + "\n")
    return path


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x`` over positive pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_loglog(path, series, title="", xlabel="", ylabel="", width=480, height=360):
    """Line chart on log axes.  ``series`` maps a label to ``(x, y)``."""
    pts = [(np.asarray(x, float), np.asarray(y, float)) for x, y in series.values()]
    xs = np.concatenate([x[(x > 0) & (y > 0)] for x, y in pts]) if pts else np.array([1.0])
    ys = np.concatenate([y[(x > 0) & (y > 0)] for x, y in pts]) if pts else np.array([1.0])
    if xs.size == 0:
        xs = ys = np.array([1.0])
    lx0, lx1 = math.log10(xs.min()), math.log10(xs.max())
    ly0, ly1 = math.log10(ys.min()), math.log10(ys.max())
    lx1 = lx1 if lx1 > lx0 else lx0 + 1
    ly1 = ly1 if ly1 > ly0 else ly0 + 1
    m = 50

    def px(v):
        return m + (math.log10(v) - lx0) / (lx1 - lx0) * (width - 2 * m)

    def py(v):
        return height - m - (math.log10(v) - ly0) / (ly1 - ly0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>']
    for e in range(math.floor(lx0), math.ceil(lx1) + 1):
        if lx0 <= e <= lx1:
            x = px(10.0 ** e)
            out.append(f'<text x="{x:.1f}" y="{height - m + 14}" text-anchor="middle">1e{e}</text>')
    for e in range(math.floor(ly0), math.ceil(ly1) + 1):
        if ly0 <= e <= ly1:
            y = py(10.0 ** e)
            out.append(f'<text x="{m - 4}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    for n, (label, (x, y)) in enumerate(series.items()):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ok = (x > 0) & (y > 0)
        color = _COLORS[n % len(_COLORS)]
        coords = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{m + 8}" y="{m + 14 * n}" fill="{color}">{label}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
