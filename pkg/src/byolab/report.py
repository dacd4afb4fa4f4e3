"""Render stored probe/RSA results into a report bundle with SVG charts.

Nothing here computes science: every number comes from files written by the
probe and rsa stages.
"""
from __future__ import annotations

import csv
import json
import math
import shutil
from pathlib import Path
from xml.sax.saxutils import escape

BAR = "#4c72b0"
NEG = "#c44e52"


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v == v else "nan"


def bar_chart_svg(title: str, labels: list[str], values: list[float], ylabel: str = "",
                  ymin: float = 0.0, ymax: float = 1.0, marked: list[bool] | None = None) -> str:
    """Vertical bar chart with a y axis, ticks and rotated category labels.

    Bars for NaN values are omitted; ``marked`` draws an asterisk over a bar.
    """
    if len(labels) != len(values):
        raise ValueError("labels and values differ in length")
    if not ymax > ymin:
        raise ValueError("ymax must exceed ymin")
    slot = 28
    left, top, plot_h, bottom = 60, 40, 220, 130
    width = left + max(1, len(labels)) * slot + 20
    height = top + plot_h + bottom

    def y(v):
        v = min(max(v, ymin), ymax)
        return top + plot_h * (ymax - v) / (ymax - ymin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for k in range(5):
        v = ymin + (ymax - ymin) * k / 4
        out.append(f'<line x1="{left - 4}" y1="{y(v):.1f}" x2="{width - 20}" y2="{y(v):.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{left - 7}" y="{y(v) + 4:.1f}" text-anchor="end">{_num(v)}</text>')
    base = y(0.0) if ymin < 0 < ymax else y(ymin)
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{base:.1f}" x2="{width - 20}" y2="{base:.1f}" stroke="black"/>')
    if ylabel:
        cy = top + plot_h / 2
        out.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = left + i * slot + 4
        if v is not None and not math.isnan(v):
            y0, y1 = sorted((base, y(v)))
            colour = BAR if v >= 0 else NEG
            out.append(f'<rect x="{x}" y="{y0:.1f}" width="{slot - 8}" height="{y1 - y0:.1f}" '
                       f'fill="{colour}"><title>{escape(lab)}: {v:.4f}</title></rect>')
            if marked is not None and marked[i]:
                out.append(f'<text x="{x + (slot - 8) / 2:.1f}" y="{y0 - 3:.1f}" '
                           f'text-anchor="middle">*</text>')
        lx = x + (slot - 8) / 2
        ly = top + plot_h + 12
        out.append(f'<text x="{lx:.1f}" y="{ly}" text-anchor="end" '
                   f'transform="rotate(-60 {lx:.1f} {ly})">{escape(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def matrix_svg(title: str, labels: list[str], matrix: list[list[float]],
               vmin: float = -1.0, vmax: float = 1.0) -> str:
    """Annotated heat map for a square similarity matrix."""
    n = len(labels)
    cell, left, top = 60, 120, 50
    width = left + n * cell + 20
    height = top + n * cell + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(n):
        out.append(f'<text x="{left - 6}" y="{top + i * cell + cell / 2 + 4:.1f}" '
                   f'text-anchor="end">{escape(labels[i])}</text>')
        out.append(f'<text x="{left + i * cell + cell / 2:.1f}" y="{top - 6}" '
                   f'text-anchor="middle">{escape(labels[i])}</text>')
        for j in range(n):
            v = matrix[i][j]
            t = 0.5 if math.isnan(v) else (min(max(v, vmin), vmax) - vmin) / (vmax - vmin)
            shade = int(round(255 - 180 * t))
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},255)" stroke="white"/>')
            out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + i * cell + cell / 2 + 4:.1f}" '
                       f'text-anchor="middle">{_num(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_matrix_csv(path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    return labels, [[float(c) for c in r[1:]] for r in rows[1:]]


def build_report(out_dir, probe_files: list = (), rsa_json=None, similarity_csv=None) -> dict:
    """Bundle result files into ``out_dir`` and draw one chart per result kind.

    Returns the bundle index, which is also written to ``report.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index: dict = {"probe": {}, "charts": []}
    for p in probe_files:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"probe result not found: {p}")
        res = json.loads(p.read_text())
        name = p.parent.name if p.name == "probe.json" else p.stem
        index["probe"][name] = {"metric_name": res["metric_name"], "metric": res["metric"],
                                "accuracy": res["accuracy"]}
    if index["probe"]:
        names = sorted(index["probe"])
        svg = bar_chart_svg("Linear-probe test metric", names,
                            [index["probe"][n]["metric"] for n in names], "metric")
        (out_dir / "probe_metrics.svg").write_text(svg)
        index["charts"].append("probe_metrics.svg")
        with open(out_dir / "probe_metrics.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["task", "metric_name", "metric", "accuracy"])
            for n in names:
                r = index["probe"][n]
                wr.writerow([n, r["metric_name"], repr(r["metric"]), repr(r["accuracy"])])

    if rsa_json is not None:
        rsa_json = Path(rsa_json)
        if not rsa_json.is_file():
            raise FileNotFoundError(f"rsa result not found: {rsa_json}")
        rsa = json.loads(rsa_json.read_text())
        shutil.copyfile(rsa_json, out_dir / "rsa.json")
        src_csv = rsa_json.with_suffix(".csv")
        if src_csv.is_file():
            shutil.copyfile(src_csv, out_dir / "rsa.csv")
        for model, feats in sorted(rsa["aggregate"].items()):
            names = list(feats)
            vals = [float("nan") if feats[f] is None else feats[f] for f in names]
            fname = f"rsa_{model}.svg"
            (out_dir / fname).write_text(bar_chart_svg(
                f"Retained feature correlations ({model})", names, vals, "mean r_s", ymin=0.0, ymax=1.0))
            index["charts"].append(fname)
        index["rsa"] = {"aggregate": rsa["aggregate"], "retained_counts": rsa["retained_counts"]}

    if similarity_csv is not None:
        similarity_csv = Path(similarity_csv)
        if not similarity_csv.is_file():
            raise FileNotFoundError(f"similarity matrix not found: {similarity_csv}")
        labels, mat = read_matrix_csv(similarity_csv)
        shutil.copyfile(similarity_csv, out_dir / "similarity.csv")
        (out_dir / "similarity.svg").write_text(matrix_svg("Inter-model DSM similarity (r_s)", labels, mat))
        index["charts"].append("similarity.svg")
        index["similarity"] = {"models": labels, "matrix": mat}

    (out_dir / "report.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
