"""Aligned text tables, comparison rows and plot series from evaluation reports."""
from dataclasses import dataclass
from pathlib import Path

NOISE_ORDER = ("clean", "snr20", "snr10", "snr0", "overlap")
SYSTEM_ORDER = ("ss", "audio", "oracle", "two-step", "e2e")
LAYOUTS = {"table1": "accuracy", "table2": "wer"}


def relative_improvement(baseline, value):
    """Percent reduction of ``value`` relative to ``baseline`` (lower is better)."""
    if baseline == 0:
        return 0.0 if value == 0 else float("-inf")
    return 100.0 * (baseline - value) / baseline


@dataclass
class ComparisonRow:
    dataset: str
    noise: str
    tracks: int
    values: dict
    improvement: dict


def _order(values, preferred):
    known = [v for v in preferred if v in values]
    return known + sorted(v for v in values if v not in preferred)


def comparison_rows(report, metric):
    rows = [r for r in report.rows if r["metric"] == metric]
    if not rows:
        raise ValueError(f"report has no {metric} cells")
    systems = _order({r["system"] for r in rows}, SYSTEM_ORDER)
    keys = sorted({(r["dataset"], r["noise"], r["tracks"]) for r in rows},
                  key=lambda k: (k[0], _order({r["noise"] for r in rows}, NOISE_ORDER).index(k[1]), k[2]))
    missing = [(d, n, t, s) for d, n, t in keys for s in systems
               if not any((r["dataset"], r["noise"], r["tracks"], r["system"]) == (d, n, t, s) for r in rows)]
    if missing:
        raise ValueError(f"incomplete grid, missing cells: {missing}")
    out = []
    for d, n, t in keys:
        vals = {r["system"]: r["value"] for r in rows if (r["dataset"], r["noise"], r["tracks"]) == (d, n, t)}
        imp = {}
        if metric == "wer" and "audio" in vals:
            imp = {s: relative_improvement(vals["audio"], v) for s, v in vals.items() if s != "audio"}
        out.append(ComparisonRow(d, n, t, vals, imp))
    return systems, out


def render_table(report, layout="table1"):
    """Fixed-width table grouped dataset -> noise -> tracks; WER tables add relative improvement vs audio-only."""
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {sorted(LAYOUTS)}")
    metric = LAYOUTS[layout]
    systems, rows = comparison_rows(report, metric)
    rel = [s for s in systems if s != "audio"] if metric == "wer" and "audio" in systems else []
    header = ["dataset", "noise", "tracks"] + systems + [f"{s} rel%" for s in rel]
    fmt = "{:.3f}" if metric == "accuracy" else "{:.1f}"
    body = []
    prev = (None, None)
    for r in rows:
        cells = [r.dataset if prev[0] != r.dataset else "",
                 r.noise if prev != (r.dataset, r.noise) else "", str(r.tracks)]
        cells += [fmt.format(r.values[s]) for s in systems]
        cells += [f"{r.improvement[s]:.1f}" for s in rel]
        body.append(cells)
        prev = (r.dataset, r.noise)
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) if i < 3 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(b) for b in body]) + "\n"


def plot_series(report):
    """{(metric, noise, system): [(tracks, value), ...]} with tracks ascending."""
    if not report.rows:
        raise ValueError("report is empty")
    series = {}
    for r in report.rows:
        series.setdefault((r["metric"], r["noise"], r["system"]), []).append((r["tracks"], r["value"]))
    return {k: sorted(v) for k, v in sorted(series.items())}


def emit_plot_data(report, out_dir):
    """Write one two-column series file per (metric, condition, system); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (metric, noise, system), pts in plot_series(report).items():
        path = out_dir / f"{metric}_{noise}_{system}.dat"
        lines = [f"# tracks {metric} ({noise}, {system})"] + [f"{x} {y!r}" for x, y in pts]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def read_series(path):
    pts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        x, y = line.split()
        pts.append((int(x), float(y)))
    return pts
