"""SVG figures with sibling CSVs built from a finished run directory.

Every figure is drawn from the rows written to its CSV, so no number lives
only inside an image.  Output bytes depend only on the run-directory inputs.
"""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..fieldcore import load_ensemble

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class ReportError(RuntimeError):
    pass


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x: float) -> str:
    return f"{x:.2f}"


# ---------------------------------------------------------------------------
# SVG primitives

class _Svg:
    def __init__(self, width: int, height: int, title: str):
        self.w, self.h = width, height
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                      f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
                      f'<rect width="{width}" height="{height}" fill="white"/>',
                      f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>']

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, anchor="middle", rotate=None) -> None:
        tr = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}"{tr}>{escape(str(s))}</text>')

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.parts + ["</svg>"]) + "\n")


class _Axes:
    """Linear data-to-pixel mapping inside a plotting rectangle."""

    def __init__(self, svg: _Svg, x0, y0, x1, y1, xlim, ylim):
        self.svg, self.box = svg, (x0, y0, x1, y1)
        self.xlim = _pad(xlim)
        self.ylim = _pad(ylim)

    def px(self, x):
        x0, _, x1, _ = self.box
        a, b = self.xlim
        return x0 + (x - a) / (b - a) * (x1 - x0)

    def py(self, y):
        _, y0, _, y1 = self.box
        a, b = self.ylim
        return y1 - (y - a) / (b - a) * (y1 - y0)

    def frame(self, xlabel: str, ylabel: str, xticks=None) -> None:
        x0, y0, x1, y1 = self.box
        s = self.svg
        s.add(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(x1 - x0)}" height="{_f(y1 - y0)}" '
              f'fill="none" stroke="black"/>')
        for v in np.linspace(*self.ylim, 5):
            y = self.py(v)
            s.add(f'<line x1="{_f(x0 - 4)}" y1="{_f(y)}" x2="{_f(x0)}" y2="{_f(y)}" stroke="black"/>')
            s.text(x0 - 6, y + 4, f"{v:.3g}", anchor="end")
        if xticks is None:
            xticks = [(v, f"{v:.3g}") for v in np.linspace(*self.xlim, 5)]
        for v, lab in xticks:
            x = self.px(v)
            s.add(f'<line x1="{_f(x)}" y1="{_f(y1)}" x2="{_f(x)}" y2="{_f(y1 + 4)}" stroke="black"/>')
            s.text(x, y1 + 16, lab)
        s.text((x0 + x1) / 2, y1 + 32, xlabel)
        s.text(x0 - 44, (y0 + y1) / 2, ylabel, rotate=-90)

    def polyline(self, xs, ys, color, dash=None, width=1.5) -> None:
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.svg.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>')

    def markers(self, xs, ys, color, r=2.0) -> None:
        for x, y in zip(xs, ys):
            self.svg.add(f'<circle cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" r="{r}" fill="{color}"/>')

    def band(self, xs, lo, hi, color) -> None:
        pts = [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, hi)]
        pts += [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs[::-1], lo[::-1])]
        self.svg.add(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')


def _pad(lim):
    a, b = float(lim[0]), float(lim[1])
    if not b > a:
        a, b = a - 0.5, b + 0.5
    return a, b


def _legend(svg: _Svg, x, y, labels) -> None:
    for i, (lab, color) in enumerate(labels):
        yy = y + 14 * i
        svg.add(f'<rect x="{_f(x)}" y="{_f(yy - 8)}" width="10" height="10" fill="{color}"/>')
        svg.text(x + 14, yy + 1, lab, anchor="start")


def line_chart(path, title, xlabel, ylabel, series: list[tuple[str, list, list]], width=560, height=360) -> None:
    svg = _Svg(width, height, title)
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    ax = _Axes(svg, 70, 30, width - 140, height - 50, (min(xs), max(xs)), (min(ys), max(ys)))
    ax.frame(xlabel, ylabel)
    for i, (_, sx, sy) in enumerate(series):
        c = PALETTE[i % len(PALETTE)]
        ax.polyline(sx, sy, c)
        ax.markers(sx, sy, c)
    _legend(svg, width - 130, 40, [(lab, PALETTE[i % len(PALETTE)]) for i, (lab, _, _) in enumerate(series)])
    svg.save(path)


def bar_chart(path, title, ylabel, groups: list[str], labels: list[str], values: np.ndarray,
              width=640, height=360) -> None:
    """Grouped bars: ``values[i, g]`` for label i in group g."""
    svg = _Svg(width, height, title)
    n_lab, n_grp = values.shape
    top = max(1.0, float(np.nanmax(values)))
    ax = _Axes(svg, 70, 30, width - 150, height - 50, (0.0, n_grp), (0.0, top))
    ax.ylim = (0.0, top)
    ax.frame("ensemble size", ylabel, xticks=[(g + 0.5, groups[g]) for g in range(n_grp)])
    bw = 0.8 / n_lab
    for i in range(n_lab):
        c = PALETTE[i % len(PALETTE)]
        for g in range(n_grp):
            v = values[i, g]
            x0, x1 = ax.px(g + 0.1 + i * bw), ax.px(g + 0.1 + (i + 1) * bw)
            y = ax.py(v)
            svg.add(f'<rect x="{_f(x0)}" y="{_f(y)}" width="{_f(x1 - x0)}" height="{_f(ax.py(0.0) - y)}" '
                    f'fill="{c}"/>')
    _legend(svg, width - 140, 40, [(lab, PALETTE[i % len(PALETTE)]) for i, lab in enumerate(labels)])
    svg.save(path)


def _viridis_like(v: float) -> str:
    # dark blue -> teal -> yellow
    stops = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)
    v = min(max(v, 0.0), 1.0) * (len(stops) - 1)
    i = min(int(v), len(stops) - 2)
    c = stops[i] + (v - i) * (stops[i + 1] - stops[i])
    return "#%02x%02x%02x" % tuple(int(round(x)) for x in c)


def heatmap(path, title, grid_values: np.ndarray, vmin=0.0, vmax=1.0, cell=8) -> None:
    ny, nx = grid_values.shape
    width, height = nx * cell + 110, ny * cell + 50
    svg = _Svg(width, height, title)
    x0, y0 = 20, 30
    for j in range(ny):
        for i in range(nx):
            v = (grid_values[j, i] - vmin) / (vmax - vmin) if vmax > vmin else 0.0
            # row 0 is the southern edge, drawn at the bottom
            y = y0 + (ny - 1 - j) * cell
            svg.add(f'<rect x="{x0 + i * cell}" y="{y}" width="{cell}" height="{cell}" fill="{_viridis_like(v)}"/>')
    bx = x0 + nx * cell + 15
    for k in range(50):
        svg.add(f'<rect x="{bx}" y="{_f(y0 + ny * cell * (1 - (k + 1) / 50))}" width="12" '
                f'height="{_f(ny * cell / 50 + 0.5)}" fill="{_viridis_like((k + 0.5) / 50)}"/>')
    svg.text(bx + 16, y0 + 8, f"{vmax:.3g}", anchor="start")
    svg.text(bx + 16, y0 + ny * cell, f"{vmin:.3g}", anchor="start")
    svg.save(path)


# ---------------------------------------------------------------------------
# report

def _records(run: Path) -> list[dict]:
    path = run / "records.csv"
    if not path.is_file():
        raise ReportError(f"no records in {run}")
    header, rows = _read_csv(path)
    if not rows:
        raise ReportError(f"no records in {run}")
    return [dict(zip(header, r)) for r in rows]


def build_report(run_dir) -> list[Path]:
    """Write figures and their CSVs under ``run_dir/report``; returns the written paths."""
    run = Path(run_dir)
    recs = _records(run)
    rep = run / "report"
    rep.mkdir(exist_ok=True)
    written: list[Path] = []

    methods = list(dict.fromkeys(r["method"] for r in recs))
    sizes = sorted({int(r["Ne"]) for r in recs})
    final: dict[tuple[str, int], dict] = {}
    for r in recs:
        key = (r["method"], int(r["Ne"]))
        if key not in final or int(r["iter"]) >= int(final[key]["iter"]):
            final[key] = r

    # normalized variance per method and ensemble size
    nv = np.full((len(methods), len(sizes)), np.nan)
    rows = []
    for i, m in enumerate(methods):
        for g, n in enumerate(sizes):
            if (m, n) in final:
                nv[i, g] = float(final[m, n]["nv"])
                rows.append([m, n, final[m, n]["nv"], final[m, n]["rmse"]])
    _write_csv(rep / "nv_bars.csv", ["method", "Ne", "nv", "rmse"], rows)
    bar_chart(rep / "nv_bars.svg", "Normalized variance after assimilation", "NV",
              [str(n) for n in sizes], methods, np.nan_to_num(nv))
    written += [rep / "nv_bars.csv", rep / "nv_bars.svg"]

    # RMSE against iteration, one figure per ensemble size
    for n in sizes:
        series, rows = [], []
        for m in methods:
            pts = sorted((int(r["iter"]), float(r["rmse"]), r["rmse"]) for r in recs
                         if r["method"] == m and int(r["Ne"]) == n)
            if pts:
                series.append((m, [p[0] for p in pts], [p[1] for p in pts]))
                rows += [[m, p[0], p[2]] for p in pts]
        stem = rep / f"rmse_iter_Ne{n}"
        _write_csv(stem.with_suffix(".csv"), ["method", "iter", "rmse"], rows)
        line_chart(stem.with_suffix(".svg"), f"Data RMSE, N_e = {n}", "assimilation step", "RMSE (bar)", series)
        written += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]

    # data match per method and ensemble size
    for path in sorted((run / "data_match").glob("*.csv")) if (run / "data_match").is_dir() else []:
        header, rows = _read_csv(path)
        if not rows:
            continue
        cols = {h: k for k, h in enumerate(header)}
        wells = sorted({int(r[cols["well"]]) for r in rows})
        svg_series = []
        for w in wells:
            sub = [r for r in rows if int(r[cols["well"]]) == w]
            day = [float(r[cols["report_day"]]) for r in sub]
            svg_series.append((w, day, {k: [float(r[cols[k]]) for r in sub] for k in header[2:]}))
        _write_csv(rep / f"data_match_{path.stem}.csv", header, rows)
        _data_match_svg(rep / f"data_match_{path.stem}.svg", path.stem, svg_series)
        written += [rep / f"data_match_{path.stem}.csv", rep / f"data_match_{path.stem}.svg"]

    # localization maps: the last-report datum of each monitor, final update
    for path in sorted((run / "tapers").glob("*.chf")) if (run / "tapers").is_dir() else []:
        stack = load_ensemble(path)
        maps = stack.values
        n_wells = 4 if maps.shape[0] % 4 == 0 else 1
        for w in range(n_wells):
            k = maps.shape[0] - n_wells + w
            m = maps[k]
            stem = rep / f"taper_{path.stem}_well{w}"
            _write_csv(stem.with_suffix(".csv"), ["j"] + [f"i{i}" for i in range(m.shape[1])],
                       [[j] + [repr(float(v)) for v in m[j]] for j in range(m.shape[0])])
            heatmap(stem.with_suffix(".svg"), f"{path.stem}, datum {k}", m)
            written += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]
    return written


def _data_match_svg(path, title, per_well, width=900, height=620) -> None:
    """2x2 panels, one per monitor: observations, prior/posterior bands and means."""
    svg = _Svg(width, height, f"Data match: {title}")
    pw, ph = width / 2, (height - 20) / 2
    for idx, (w, day, cols) in enumerate(per_well[:4]):
        cx, cy = (idx % 2) * pw, 20 + (idx // 2) * ph
        vals = [v for k in ("observed", "prior_p10", "prior_p90", "post_p10", "post_p90") for v in cols[k]]
        ax = _Axes(svg, cx + 70, cy + 25, cx + pw - 20, cy + ph - 45, (min(day), max(day)), (min(vals), max(vals)))
        ax.frame("day", f"well {w} pressure (bar)")
        ax.band(day, cols["prior_p10"], cols["prior_p90"], "#7f7f7f")
        ax.band(day, cols["post_p10"], cols["post_p90"], PALETTE[0])
        ax.polyline(day, cols["prior_mean"], "#7f7f7f", dash="4,3")
        ax.polyline(day, cols["post_mean"], PALETTE[0])
        ax.polyline(day, cols["truth"], "black", width=1.0)
        ax.markers(day, cols["observed"], PALETTE[1])
    _legend(svg, width - 120, 30, [("prior", "#7f7f7f"), ("posterior", PALETTE[0]), ("observed", PALETTE[1]),
                                   ("truth", "black")])
    svg.save(path)
