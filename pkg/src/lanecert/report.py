"""Standalone SVG figures rendered directly from CSV artifacts.

Plots are built as plain strings with fixed numeric formatting so a rerun
with identical inputs produces byte-identical files.  No plotting library
is involved; the figures are simple multi-panel line charts aimed at batch
operators inspecting pipeline output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ParameterError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 64, 16, 34, 40


def read_csv_columns(path):
    """Read a CSV with optional # comment lines; returns (header, column dict).

    Numeric cells become floats; blank cells become NaN so ragged final rows
    (e.g. the trajectory terminal-state row) stay aligned.
    """
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"csv file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            rows.append(next(csv.reader([line.rstrip("\n")])))
    if not rows:
        raise ParameterError(f"csv file {path} is empty")
    header = rows[0]
    cols = {name: [] for name in header}
    for row in rows[1:]:
        if len(row) != len(header):
            continue
        for name, cell in zip(header, row):
            try:
                cols[name].append(float(cell) if cell != "" else np.nan)
            except ValueError:
                cols[name].append(np.nan)
    return header, {name: np.array(vals) for name, vals in cols.items()}


def _ticks(lo: float, hi: float, count: int = 5):
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    return np.linspace(lo, hi, count)


def _fmt_tick(v: float) -> str:
    return f"{v:.4g}"


def _panel_svg(panel: dict, width: int, height: int, y_off: int) -> list[str]:
    """Render one panel (title, xlabel, ylabel, series list) as SVG lines."""
    inner_w = width - _PAD_L - _PAD_R
    inner_h = height - _PAD_T - _PAD_B
    series = panel["series"]
    finite = [(np.asarray(x, float), np.asarray(y, float)) for x, y, *_ in
              [(s[1], s[2]) for s in series]]
    xs = np.concatenate([x[np.isfinite(y)] for x, y in finite if len(x)])
    ys = np.concatenate([y[np.isfinite(y)] for x, y in finite if len(y)])
    if xs.size == 0:
        xs, ys = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    if x_hi - x_lo < 1e-12:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    pad_y = 0.06 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    def px(v):
        return _PAD_L + (v - x_lo) / (x_hi - x_lo) * inner_w

    def py(v):
        return y_off + _PAD_T + inner_h - (v - y_lo) / (y_hi - y_lo) * inner_h

    out = []
    out.append(f'<rect x="{_PAD_L}" y="{y_off + _PAD_T}" width="{inner_w}" '
               f'height="{inner_h}" fill="none" stroke="#888" stroke-width="1"/>')
    out.append(f'<text x="{_PAD_L}" y="{y_off + _PAD_T - 12}" font-size="13" '
               f'fill="#222">{panel.get("title", "")}</text>')
    for tv in _ticks(x_lo, x_hi):
        xpix = px(tv)
        out.append(f'<line x1="{xpix:.2f}" y1="{py(y_lo):.2f}" x2="{xpix:.2f}" '
                   f'y2="{py(y_lo) + 4:.2f}" stroke="#888"/>')
        out.append(f'<text x="{xpix:.2f}" y="{py(y_lo) + 16:.2f}" font-size="10" '
                   f'fill="#444" text-anchor="middle">{_fmt_tick(tv)}</text>')
    for tv in _ticks(y_lo, y_hi):
        ypix = py(tv)
        out.append(f'<line x1="{_PAD_L - 4}" y1="{ypix:.2f}" x2="{_PAD_L}" '
                   f'y2="{ypix:.2f}" stroke="#888"/>')
        out.append(f'<text x="{_PAD_L - 7}" y="{ypix + 3:.2f}" font-size="10" '
                   f'fill="#444" text-anchor="end">{_fmt_tick(tv)}</text>')
    out.append(f'<text x="{_PAD_L + inner_w / 2:.2f}" y="{y_off + height - 8}" '
               f'font-size="11" fill="#444" text-anchor="middle">'
               f'{panel.get("xlabel", "")}</text>')
    out.append(f'<text x="14" y="{y_off + _PAD_T + inner_h / 2:.2f}" '
               f'font-size="11" fill="#444" text-anchor="middle" '
               f'transform="rotate(-90 14 {y_off + _PAD_T + inner_h / 2:.2f})">'
               f'{panel.get("ylabel", "")}</text>')
    for i, (label, x, y) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        keep = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in
                       zip(x[keep], y[keep]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   f'stroke-width="1.4"/>')
        lx = _PAD_L + inner_w - 8
        ly = y_off + _PAD_T + 14 + 14 * i
        out.append(f'<text x="{lx}" y="{ly}" font-size="11" fill="{color}" '
                   f'text-anchor="end">{label}</text>')
    return out


def svg_figure(panels, path, width: int = 760, panel_height: int = 240):
    """Write a stacked-panel SVG figure; panels is a list of panel dicts."""
    if not panels:
        raise ParameterError("figure needs at least one panel")
    total_h = panel_height * len(panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{total_h}" viewBox="0 0 {width} {total_h}">',
             f'<rect width="{width}" height="{total_h}" fill="#ffffff"/>',
             '<g font-family="Helvetica, Arial, sans-serif">']
    for i, panel in enumerate(panels):
        parts.extend(_panel_svg(panel, width, panel_height, i * panel_height))
    parts.append("</g></svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def trajectory_figure(traj_csv, out_svg, bound_csv=None):
    """Panels: look-ahead offset (with bound when given), speed, curvature."""
    _, cols = read_csv_columns(traj_csv)
    k = cols["k"]
    panels = []
    offset_series = [("e_yL", k, cols["x1"])]
    if bound_csv is not None:
        _, bcols = read_csv_columns(bound_csv)
        offset_series.append(("bound", bcols["k"], bcols["bound"]))
        offset_series.append(("-bound", bcols["k"], -bcols["bound"]))
    panels.append({"title": "look-ahead lateral offset", "xlabel": "step",
                   "ylabel": "e_yL [m]", "series": offset_series})
    panels.append({"title": "longitudinal speed", "xlabel": "step",
                   "ylabel": "V_x [m/s]", "series": [("V_x", k, cols["Vx"])]})
    panels.append({"title": "road curvature", "xlabel": "step",
                   "ylabel": "kappa [1/m]",
                   "series": [("kappa", k, cols["kappa"])]})
    svg_figure(panels, out_svg)


def loss_figure(loss_csv, out_svg):
    _, cols = read_csv_columns(loss_csv)
    svg_figure([{"title": "training loss", "xlabel": "epoch",
                 "ylabel": "mean squared input error",
                 "series": [("loss", cols["epoch"], cols["loss"])]}], out_svg)


def containment_figure(report_csv, out_svg):
    _, cols = read_csv_columns(report_csv)
    runs = cols["run"]
    keep = np.isfinite(runs)
    svg_figure([{"title": "containment margin per run", "xlabel": "run",
                 "ylabel": "min_k (bound - |e_yL|) [m]",
                 "series": [("margin", runs[keep], cols["min_margin"][keep])]},
                {"title": "peak offset vs peak bound", "xlabel": "run",
                 "ylabel": "[m]",
                 "series": [("max |e_yL|", runs[keep], cols["max_abs_eyL"][keep]),
                            ("max bound", runs[keep], cols["max_bound"][keep])]}],
               out_svg)


def aggregate_report(out_dir, svg_name: str = "report.svg",
                     summary_name: str = "report_summary.csv"):
    """Bundle whatever standard artifacts exist in a directory into one figure.

    Returns the list of artifact stems included.  Looks for trajectory.csv
    (+ bound.csv), loss_curve.csv and containment.csv.
    """
    out_dir = Path(out_dir)
    panels = []
    summary = []
    traj = out_dir / "trajectory.csv"
    bound = out_dir / "bound.csv"
    if traj.exists():
        _, cols = read_csv_columns(traj)
        series = [("e_yL", cols["k"], cols["x1"])]
        if bound.exists():
            _, bcols = read_csv_columns(bound)
            series += [("bound", bcols["k"], bcols["bound"]),
                       ("-bound", bcols["k"], -bcols["bound"])]
            margin = np.nanmin(bcols["bound"] - np.abs(cols["x1"][:len(bcols["bound"])]))
            summary.append(("trajectory", "min containment margin [m]", margin))
        panels.append({"title": "look-ahead lateral offset", "xlabel": "step",
                       "ylabel": "e_yL [m]", "series": series})
        panels.append({"title": "longitudinal speed", "xlabel": "step",
                       "ylabel": "V_x [m/s]",
                       "series": [("V_x", cols["k"], cols["Vx"])]})
        panels.append({"title": "road curvature", "xlabel": "step",
                       "ylabel": "kappa [1/m]",
                       "series": [("kappa", cols["k"], cols["kappa"])]})
        summary.append(("trajectory", "max |e_yL| [m]",
                        np.nanmax(np.abs(cols["x1"]))))
    loss = out_dir / "loss_curve.csv"
    if loss.exists():
        _, cols = read_csv_columns(loss)
        panels.append({"title": "training loss", "xlabel": "epoch",
                       "ylabel": "MSE", "series": [("loss", cols["epoch"],
                                                    cols["loss"])]})
        summary.append(("training", "final loss", cols["loss"][-1]))
        summary.append(("training", "initial loss", cols["loss"][0]))
    cont = out_dir / "containment.csv"
    if cont.exists():
        _, cols = read_csv_columns(cont)
        keep = np.isfinite(cols["run"])
        panels.append({"title": "containment margin per run", "xlabel": "run",
                       "ylabel": "min margin [m]",
                       "series": [("margin", cols["run"][keep],
                                   cols["min_margin"][keep])]})
        summary.append(("containment", "worst margin [m]",
                        np.nanmin(cols["min_margin"][keep])))
        summary.append(("containment", "violations",
                        np.nansum(cols["violated"][keep])))
    if not panels:
        raise ParameterError(f"no known artifacts found in {out_dir}")
    svg_figure(panels, out_dir / svg_name)
    with open(out_dir / summary_name, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["artifact", "quantity", "value"])
        for row in summary:
            writer.writerow([row[0], row[1], repr(float(row[2]))])
    return [p["title"] for p in panels]
