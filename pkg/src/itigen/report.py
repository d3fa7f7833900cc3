"""Side-by-side comparison tables and image grids for finished runs.

A run directory is what ``generate`` and ``evaluate`` leave behind: a
``manifest.tsv`` of images and, once evaluated, a ``metrics.json`` list of
per-method reports. Anything missing shows up as ``absent`` rather than
failing the report.
"""

from __future__ import annotations

import html
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .generation import METHODS, read_manifest

ABSENT = "absent"


@dataclass
class RunSummary:
    directory: Path
    metrics: list[dict] = field(default_factory=list)
    manifest: list[dict] = field(default_factory=list)

    def columns(self) -> list[tuple[str, dict | None]]:
        """(label, metrics) per method found in this run."""
        methods = [m["method"] for m in self.metrics]
        for row in self.manifest:
            if row["method"] not in methods:
                methods.append(row["method"])
        by_method = {m["method"]: m for m in self.metrics}
        if not methods:
            return [(self.directory.name, None)]
        return [(m, by_method.get(m)) for m in methods]


def load_run(directory) -> RunSummary:
    directory = Path(directory)
    metrics = []
    path = directory / "metrics.json"
    if path.exists():
        try:
            data = json.loads(path.read_text())
            metrics = data if isinstance(data, list) else [data]
        except json.JSONDecodeError:
            metrics = []
    return RunSummary(directory, metrics, read_manifest(directory / "manifest.tsv"))


def _method_order(label: str) -> int:
    return METHODS.index(label) if label in METHODS else len(METHODS)


def comparison_table(runs: list[RunSummary]) -> tuple[list[str], list[list[str]]]:
    """Header and rows of the metric table; one column per (run, method)."""
    columns = []
    for run in runs:
        for label, metrics in run.columns():
            if len(runs) > 1 and sum(1 for r in runs for lbl, _ in r.columns() if lbl == label) > 1:
                label = f"{label} ({run.directory.name})"
            columns.append((label, metrics))
    columns.sort(key=lambda c: _method_order(c[0].split(" (")[0]))
    attrs: list[str] = []
    for _, m in columns:
        for name in ((m or {}).get("kl_nats") or {}).get("marginals", {}):
            if name not in attrs:
                attrs.append(name)

    def fmt(value, digits=6):
        return ABSENT if value is None else f"{value:.{digits}f}"

    rows = [["KL joint (nats)"] + [fmt(((m or {}).get("kl_nats") or {}).get("joint"))
                                  for _, m in columns]]
    for name in attrs:
        rows.append([f"KL {name} (nats)"] + [
            fmt((((m or {}).get("kl_nats") or {}).get("marginals") or {}).get(name))
            for _, m in columns])
    rows.append(["FID"] + [fmt((m or {}).get("fid"), 2) for _, m in columns])
    rows.append(["images"] + [ABSENT if not m else str(m.get("sample_count")) for _, m in columns])
    rows.append(["label source"] + [(m or {}).get("label_source") or ABSENT for _, m in columns])
    return ["metric"] + [c[0] for c in columns], rows


def render_text(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows]) + "\n"


def render_html(header: list[str], rows: list[list[str]], grids: dict[str, str] | None = None) -> str:
    esc = html.escape
    parts = ["<!doctype html>", "<html><head><meta charset='utf-8'><title>run comparison</title>",
             "<style>td,th{padding:2px 8px;border:1px solid #bbb}table{border-collapse:collapse}"
             "td.absent{color:#999}</style></head><body>", "<table>",
             "<tr>" + "".join(f"<th>{esc(h)}</th>" for h in header) + "</tr>"]
    for row in rows:
        cells = [f"<th>{esc(row[0])}</th>"] + [
            f"<td class='absent'>{ABSENT}</td>" if c == ABSENT else f"<td>{esc(c)}</td>"
            for c in row[1:]]
        parts.append("<tr>" + "".join(cells) + "</tr>")
    parts.append("</table>")
    for label, src in (grids or {}).items():
        parts.append(f"<h3>{esc(label)}</h3><img src='{esc(src)}' alt='{esc(label)}'>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def image_grid(rows: list[list[Path]], path, tile: int = 64, pad: int = 2) -> tuple[int, int]:
    """Tile images into a grid (one row per combination); returns (rows, columns)."""
    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    canvas = np.full((max(n_rows, 1) * (tile + pad) + pad, max(n_cols, 1) * (tile + pad) + pad, 3),
                     255, dtype=np.uint8)
    for r, images in enumerate(rows):
        for c, image_path in enumerate(images):
            with Image.open(image_path) as img:
                arr = np.asarray(img.convert("RGB").resize((tile, tile), Image.NEAREST))
            y, x = pad + r * (tile + pad), pad + c * (tile + pad)
            canvas[y:y + tile, x:x + tile] = arr
    Image.fromarray(canvas).save(path)
    return n_rows, n_cols


def run_grids(run: RunSummary, out_dir, per_combination: int = 8) -> dict[str, tuple[Path, tuple[int, int]]]:
    """One grid per method: rows are combinations in index order, columns are images."""
    out_dir = Path(out_dir)
    grouped: dict[str, dict[int, list[Path]]] = {}
    for row in run.manifest:
        path = run.directory / row["path"]
        if not path.exists():
            continue
        grouped.setdefault(row["method"], {}).setdefault(int(row["combination_index"]), []).append(path)
    out = {}
    for method, combos in grouped.items():
        rows = [sorted(combos[k], key=lambda p: int(p.stem) if p.stem.isdigit() else p.stem)
                [:per_combination] for k in sorted(combos)]
        target = out_dir / f"grid_{run.directory.name}_{method}.png"
        out[method] = (target, image_grid(rows, target))
    return out


def build_report(run_dirs, out_dir, benchmark_csv=None, per_combination: int = 8) -> dict:
    """Write ``report.txt``, ``report.html``, image grids and an optional benchmark plot."""
    from . import benchmark

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    header, rows = comparison_table(runs)
    grids = {}
    for run in runs:
        for method, (path, shape) in run_grids(run, out_dir, per_combination).items():
            grids[f"{run.directory.name} / {method} ({shape[0]}x{shape[1]})"] = path.name
    text = render_text(header, rows)
    summary = {"columns": header[1:], "grids": grids}
    if benchmark_csv is not None:
        bench_rows = benchmark.read_csv(benchmark_csv)
        slope, intercept, r2 = benchmark.fit_log_linear(
            [r["n_attributes"] for r in bench_rows], [r["mean_seconds"] for r in bench_rows])
        plot_path = benchmark.plot(bench_rows, out_dir / "benchmark.png", (slope, intercept))
        grids["training time vs attributes"] = plot_path.name
        calls = [r["calls_per_epoch"] for r in bench_rows]
        text += (f"\nbenchmark: ln(time) slope {slope:.4f} (x{np.exp(slope):.3f} per attribute), "
                 f"R^2 {r2:.4f}; call ratio per attribute "
                 f"{', '.join(f'{b / a:g}' for a, b in zip(calls, calls[1:]))}\n")
        summary["benchmark"] = {"slope": slope, "intercept": intercept, "r_squared": r2}
    (out_dir / "report.txt").write_text(text)
    (out_dir / "report.html").write_text(render_html(header, rows, grids))
    summary["text"] = text
    return summary
