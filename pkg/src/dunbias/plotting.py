"""Render result CSVs as SVG figures (mean line with a shaded one-std band).

Output is byte-stable for a given CSV: the SVG hash salt is pinned and the
date metadata is suppressed.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import DataError  # noqa: E402
from .harness import ACTIVE_COLUMNS, ALB_COLUMNS, aggregate, atomic_write, read_results  # noqa: E402

PLOT_KINDS = ("alb", "ofb", "downstream", "temp-sweep", "posteriors")

_REQUIRED = {
    "alb": {"dataset", "model", "M", "bias_r_tilde", "bias_r_lure"},
    "ofb": {"dataset", "model", "objective", "n_train", "b_ofb"},
    "downstream": {"dataset", "model", "objective", "n_train", "test_nll"},
    "temp-sweep": {"dataset", "temperature", "n_train", "test_nll"},
    "posteriors": {"dataset", "rep", "query", "posterior"},
}
assert all(cols <= set(ALB_COLUMNS if k == "alb" else ACTIVE_COLUMNS) for k, cols in _REQUIRED.items())


def _band(ax, x, rows, value, label):
    mean = np.array([r[f"{value}_mean"] for r in rows])
    std = np.array([r[f"{value}_std"] for r in rows])
    line, = ax.plot(x, mean, label=label, linewidth=1.5)
    ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, linewidth=0)


def _numeric(rows, cols):
    out = []
    for r in rows:
        d = dict(r)
        for c in cols:
            d[c] = float(d[c])
        out.append(d)
    return out


def _draw(kind: str, dataset: str, rows: list[dict], ax) -> None:
    if kind == "alb":
        rows = _numeric(rows, ["M", "bias_r_tilde", "bias_r_lure"])
        agg = aggregate(rows, ["M"], ["bias_r_tilde", "bias_r_lure"])
        x = [a["M"] for a in agg]
        _band(ax, x, agg, "bias_r_tilde", r"$\tilde r$")
        _band(ax, x, agg, "bias_r_lure", r"$\tilde r_{\mathrm{LURE}}$")
        ax.axhline(0.0, color="black", linewidth=0.8, linestyle="--")
        ax.set_xlabel("M (acquired test points)")
        ax.set_ylabel("active learning bias")
    elif kind == "posteriors":
        rows = _numeric(rows, ["rep", "query"])
        first, last = [], []
        for rep in sorted({r["rep"] for r in rows}):
            mine = sorted((r for r in rows if r["rep"] == rep), key=lambda r: r["query"])
            first.append([float(v) for v in mine[0]["posterior"].split(";")])
            last.append([float(v) for v in mine[-1]["posterior"].split(";")])
        depths = np.arange(len(first[0]))
        ax.bar(depths - 0.2, np.mean(first, axis=0), width=0.4, label="smallest train set")
        ax.bar(depths + 0.2, np.mean(last, axis=0), width=0.4, label="largest train set")
        ax.set_xlabel("depth")
        ax.set_ylabel("posterior probability")
    else:
        value = "b_ofb" if kind == "ofb" else "test_nll"
        series = "temperature" if kind == "temp-sweep" else ("model" if kind == "ofb" else "objective")
        rows = _numeric(rows, ["n_train", value] + (["temperature"] if series == "temperature" else []))
        agg = aggregate(rows, [series, "n_train"], [value])
        for key in sorted({a[series] for a in agg}):
            mine = [a for a in agg if a[series] == key]
            label = f"T={key:g}" if series == "temperature" else str(key)
            _band(ax, [a["n_train"] for a in mine], mine, value, label)
        if kind == "ofb":
            ax.axhline(0.0, color="black", linewidth=0.8, linestyle="--")
        ax.set_xlabel("acquired points")
        ax.set_ylabel("overfitting bias" if kind == "ofb" else "test NLL")
    ax.set_title(dataset)
    ax.legend(frameon=False)


def render(rows: list[dict], kind: str, dataset: str) -> str:
    """SVG text for one dataset's rows."""
    with plt.rc_context({"svg.hashsalt": "dunbias", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        try:
            _draw(kind, dataset, rows, ax)
            fig.tight_layout()
            buf = io.StringIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buf.getvalue()


def plot(results_csv: str | Path, kind: str, output_dir: str | Path | None = None) -> list[Path]:
    """Write one ``<kind>_<dataset>.svg`` per dataset found in ``results_csv``."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}")
    results_csv = Path(results_csv)
    rows = read_results(results_csv)
    if not rows:
        raise DataError(f"{results_csv}: no result rows")
    missing = _REQUIRED[kind] - set(rows[0])
    if missing:
        raise DataError(f"{results_csv}: columns {sorted(missing)} required for {kind} plots")
    out_dir = Path(output_dir) if output_dir else results_csv.parent
    written = []
    for dataset in sorted({r["dataset"] for r in rows}):
        svg = render([r for r in rows if r["dataset"] == dataset], kind, dataset)
        path = out_dir / f"{kind}_{dataset}.svg"
        atomic_write(path, svg)
        written.append(path)
    return written
