"""Summaries and box plots from experiment result CSVs."""
import csv
import os
from collections import OrderedDict

import numpy as np

from .errors import NoResults


def _float(x):
    return float(x) if x not in ("", None) else None


def read_long_csv(path):
    """``<stem>_folds.csv`` -> OrderedDict[(method, setting)] -> list of Dice."""
    cells = OrderedDict()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault((row["method"], row["setting"]), []).append(float(row["dice"]))
    return cells


def read_wide_csv(path):
    """Parse a Table-2-shaped CSV (Methods, Fold 1..k, Avg, Std).

    Returns ``{method: {"folds": [...], "avg": float|None, "std": float|None}}``
    or None if the file has no fold columns.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return None
    header = rows[0]
    fold_cols = [i for i, h in enumerate(header) if h.strip().lower().startswith("fold")]
    if not fold_cols:
        return None
    avg_col = next((i for i, h in enumerate(header) if h.strip().lower() in ("avg", "mean")), None)
    std_col = next((i for i, h in enumerate(header) if h.strip().lower() == "std"), None)
    out = OrderedDict()
    for r in rows[1:]:
        if not r:
            continue
        folds = [float(r[i]) for i in fold_cols if i < len(r) and r[i] != ""]
        out[r[0]] = {
            "folds": folds,
            "avg": _float(r[avg_col]) if avg_col is not None else None,
            "std": _float(r[std_col]) if std_col is not None else None,
        }
    return out


def aggregate(values):
    """Mean and sample standard deviation (ddof=1, as in the published tables)."""
    v = np.asarray(values, dtype=np.float64)
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


def collect(results_dir):
    """Gather every result table under ``results_dir``.

    Returns a list of ``(stem, cells, stored)`` where ``cells`` maps
    (method, setting) to per-fold values and ``stored`` holds Avg/Std read from
    a wide CSV when one exists (else an empty dict).
    """
    if not os.path.isdir(results_dir):
        raise NoResults(f"{results_dir} is not a directory")
    names = sorted(os.listdir(results_dir))
    tables = []
    seen = set()
    for name in names:
        if name.endswith("_folds.csv"):
            stem = name[: -len("_folds.csv")]
            cells = read_long_csv(os.path.join(results_dir, name))
            stored = {}
            if stem + ".csv" in names:
                wide = read_wide_csv(os.path.join(results_dir, stem + ".csv"))
                if wide:
                    stored = {m: (w["avg"], w["std"]) for m, w in wide.items()}
            tables.append((stem, cells, stored))
            seen.add(stem)
    for name in names:
        if not name.endswith(".csv") or name.endswith("_folds.csv"):
            continue
        stem = name[:-4]
        if stem in seen:
            continue
        wide = read_wide_csv(os.path.join(results_dir, name))
        if wide is None:
            continue
        cells = OrderedDict(((m, "all"), w["folds"]) for m, w in wide.items())
        stored = {m: (w["avg"], w["std"]) for m, w in wide.items()}
        tables.append((stem, cells, stored))
    tables = [t for t in tables if any(len(v) for v in t[1].values())]
    if not tables:
        raise NoResults(f"no result CSVs under {results_dir}")
    return tables


def summary_rows(tables):
    rows = []
    for stem, cells, stored in tables:
        for (method, setting), v in cells.items():
            mean, std = aggregate(v)
            s_avg, s_std = stored.get(method, (None, None)) if len(cells) == len(stored) else (None, None)
            rows.append({
                "table": stem, "method": method, "setting": setting, "n": len(v),
                "mean": mean, "std": std, "stored_avg": s_avg, "stored_std": s_std,
            })
    return rows


def markdown_table(rows):
    lines = ["| table | method | setting | n | mean Dice | std |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['table']} | {r['method']} | {r['setting']} | {r['n']} | {r['mean']:.4f} | {r['std']:.4f} |")
    return "\n".join(lines) + "\n"


def box_plot(path, title, labels, data):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(labels) + 1.5), 3.5))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("Dice")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _safe(s):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(s))


def make_report(results_dir, out_dir=None):
    """Box plot per setting (one box per method) plus ``summary.md``.

    Returns ``{"summary": path, "images": [{"path", "setting", "n_boxes"}], "rows": [...]}``.
    """
    tables = collect(results_dir)
    out_dir = out_dir or results_dir
    os.makedirs(out_dir, exist_ok=True)
    images = []
    for stem, cells, _ in tables:
        settings = list(OrderedDict.fromkeys(s for _, s in cells))
        for setting in settings:
            labels = [m for (m, s) in cells if s == setting and cells[(m, s)]]
            data = [cells[(m, setting)] for m in labels]
            if not labels:
                continue
            path = os.path.join(out_dir, f"{_safe(stem)}_box_{_safe(setting)}.png")
            box_plot(path, f"{stem}: {setting}", labels, data)
            images.append({"path": path, "setting": setting, "n_boxes": len(labels)})
    rows = summary_rows(tables)
    summary = os.path.join(out_dir, "summary.md")
    with open(summary, "w") as fh:
        fh.write("# Results summary\n\n")
        fh.write(markdown_table(rows))
    return {"summary": summary, "images": images, "rows": rows}
