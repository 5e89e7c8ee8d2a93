"""CSV tables, the run manifest and small self-contained SVG plots.

CSV schema (``results.csv``), one row per (condition, seed, family):

    condition, seed, family, accuracy, mean_tokens, config_hash

Floats are written with ``repr`` so a parse-back reproduces them exactly.
No file contains timestamps or host information; identical runs produce
identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import EvalResult

CSV_FIELDS = ("condition", "seed", "family", "accuracy", "mean_tokens", "config_hash")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
           "#7f7f7f", "#bcbd22", "#393b79", "#637939")


class ReportError(OSError):
    pass


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc


# -- tables --------------------------------------------------------------------------------
def results_csv(results: list[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in results:
        for f in r.families:
            w.writerow([r.condition, r.seed, f, repr(r.accuracy[f]), repr(r.mean_tokens[f]), r.config_hash])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["accuracy"] = float(row["accuracy"])
        row["mean_tokens"] = float(row["mean_tokens"])
    return rows


def summary_rows(results: list[EvalResult], base_label: str = "base") -> list[dict]:
    """Per condition: mean/stdev over seeds of mean accuracy, per-family delta vs base, tokens."""
    by_cond: dict[str, list[EvalResult]] = {}
    for r in results:
        by_cond.setdefault(r.condition, []).append(r)
    base = {r.seed: r for r in by_cond.get(base_label, [])}
    rows = []
    for cond, rs in by_cond.items():
        accs = np.array([r.mean_accuracy for r in rs])
        row = {"condition": cond, "seeds": len(rs), "mean_accuracy": float(accs.mean()),
               "std_accuracy": float(accs.std()), "mean_tokens": float(np.mean([r.overall_tokens for r in rs]))}
        for f in rs[0].families:
            row[f"acc_{f}"] = float(np.mean([r.accuracy[f] for r in rs]))
            paired = [r.accuracy[f] - base[r.seed].accuracy[f] for r in rs if r.seed in base]
            row[f"delta_{f}"] = float(np.mean(paired)) if paired else float("nan")
        rows.append(row)
    return rows


def rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serialisable: {type(x).__name__}")


# -- SVG --------------------------------------------------------------------------------------
def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    t = f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', t, *body, "</svg>"]) + "\n"


def _axes(x0, y0, w, h, xlim, ylim, xlabel, ylabel):
    sx = lambda x: x0 + (x - xlim[0]) / (xlim[1] - xlim[0] or 1.0) * w
    sy = lambda y: y0 + h - (y - ylim[0]) / (ylim[1] - ylim[0] or 1.0) * h
    body = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="black"/>']
    for k in range(5):
        xv = xlim[0] + k * (xlim[1] - xlim[0]) / 4
        yv = ylim[0] + k * (ylim[1] - ylim[0]) / 4
        body.append(f'<text x="{_fmt(sx(xv))}" y="{y0 + h + 14}" text-anchor="middle">{xv:.2g}</text>')
        body.append(f'<text x="{x0 - 4}" y="{_fmt(sy(yv) + 4)}" text-anchor="end">{yv:.2g}</text>')
    body.append(f'<text x="{x0 + w / 2:.1f}" y="{y0 + h + 30}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="12" y="{y0 + h / 2:.1f}" transform="rotate(-90 12 {y0 + h / 2:.1f})" '
                f'text-anchor="middle">{escape(ylabel)}</text>')
    return sx, sy, body


def line_plot(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str, ylabel: str,
              ylim=(0.0, 1.0)) -> str:
    xs = [x for v in series.values() for x in v[0]] or [0.0, 1.0]
    sx, sy, body = _axes(60, 30, 360, 240, (min(xs), max(xs)), ylim, xlabel, ylabel)
    for k, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="430" y="{40 + 14 * k}" fill="{color}">{escape(name)}</text>')
    return _svg(560, 310, body, title)


def scatter_plot(points: np.ndarray, labels, title: str, xlabel: str = "PC1", ylabel: str = "PC2") -> str:
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        points = np.zeros((1, 2))
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = 0.05 * np.maximum(hi - lo, 1e-9)
    sx, sy, body = _axes(60, 30, 360, 300, (lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]),
                         xlabel, ylabel)
    names = sorted(set(labels))
    for (x, y), lab in zip(points, labels):
        color = PALETTE[names.index(lab) % len(PALETTE)]
        body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2" fill="{color}" fill-opacity="0.6"/>')
    for k, name in enumerate(names):
        body.append(f'<text x="430" y="{40 + 14 * k}" fill="{PALETTE[k % len(PALETTE)]}">{escape(str(name))}</text>')
    return _svg(560, 370, body, title)


def heatmap(matrix, row_labels, col_labels, title: str, vmin: float | None = None,
            vmax: float | None = None) -> str:
    M_ = np.asarray(matrix, dtype=np.float64)
    if M_.size == 0:
        return _svg(200, 60, [], title)
    lo = float(M_.min()) if vmin is None else vmin
    hi = float(M_.max()) if vmax is None else vmax
    cell = 36
    x0, y0 = 90, 40
    body = []
    for i in range(M_.shape[0]):
        body.append(f'<text x="{x0 - 4}" y="{y0 + cell * i + cell / 2 + 4:.1f}" text-anchor="end">'
                    f'{escape(str(row_labels[i]))}</text>')
        for j in range(M_.shape[1]):
            t = 0.0 if hi == lo else (M_[i, j] - lo) / (hi - lo)
            t = min(max(t, 0.0), 1.0)
            r, g, b = int(255 - 200 * t), int(255 - 150 * t), 255
            body.append(f'<rect x="{x0 + cell * j}" y="{y0 + cell * i}" width="{cell}" height="{cell}" '
                        f'fill="rgb({r},{g},{b})" stroke="white"/>')
            body.append(f'<text x="{x0 + cell * j + cell / 2:.1f}" y="{y0 + cell * i + cell / 2 + 4:.1f}" '
                        f'text-anchor="middle" font-size="9">{M_[i, j]:.2f}</text>')
    for j in range(M_.shape[1]):
        body.append(f'<text x="{x0 + cell * j + cell / 2:.1f}" y="{y0 + cell * M_.shape[0] + 14}" '
                    f'text-anchor="middle">{escape(str(col_labels[j]))}</text>')
    return _svg(x0 + cell * M_.shape[1] + 20, y0 + cell * M_.shape[0] + 30, body, title)


# -- emission -------------------------------------------------------------------------------------
def emit_reports(results: list[EvalResult], outdir, manifest: dict, plots: dict[str, str] | None = None,
                 tables: dict[str, list[dict]] | None = None) -> list[Path]:
    """Write the manifest, and when there are results the CSV tables and plots.

    Returns the written paths in a fixed order.
    """
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {outdir}: {exc.strerror or exc}") from exc
    written = []
    mpath = outdir / "manifest.json"
    _write(mpath, canonical_json(manifest))
    written.append(mpath)
    if not results:
        return written
    p = outdir / "results.csv"
    _write(p, results_csv(results))
    written.append(p)
    p = outdir / "summary.csv"
    _write(p, rows_csv(summary_rows(results)))
    written.append(p)
    for name, rows in sorted((tables or {}).items()):
        p = outdir / f"{name}.csv"
        _write(p, rows_csv(rows))
        written.append(p)
    for name, svg in sorted((plots or {}).items()):
        p = outdir / f"{name}.svg"
        _write(p, svg)
        written.append(p)
    return written
