"""Result files shared by the CLI subcommands, and the combined report.

Everything lives in one output directory:

- ``metrics.csv``: one row per (model, NA fraction), tagged with the cohort digest
- ``fold_auc.csv``: per-fold test AUCs, the samples for Kruskal-Wallis
- ``roc_<model>_<na>.csv``: ROC points of the pooled test predictions
- ``kruskal.csv`` and ``roc.svg``: written by :func:`run_report`
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import MODELS, Experiment  # noqa: E402
from .metrics import EvalReport, MetricsError, kruskal_wallis  # noqa: E402

METRICS_FIELDS = (*EvalReport.CSV_FIELDS, "cohort_digest")
FOLD_FIELDS = ("model", "na_fraction", "fold", "auc", "cohort_digest")
KRUSKAL_FIELDS = ("group_a", "group_b", "na_fraction", "H", "p", "n_a", "n_b")
COMPARISONS = (("clin", "multi"), ("multi", "multim"))


class ReportError(ValueError):
    """Inconsistent or missing result files."""


def _na_key(fraction: float) -> str:
    return f"{fraction:.4f}"


def _model_order(name: str) -> int:
    return MODELS.index(name) if name in MODELS else len(MODELS)


def _read_rows(path: Path, fields: Sequence[str]) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(fields):
            raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _write_rows(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def roc_path(out: Path, model: str, fraction: float) -> Path:
    return out / f"roc_{model}_{_na_key(fraction)}.csv"


def record_experiment(exp: Experiment, out: str | Path) -> None:
    """Merge the experiment's reports into the result files under ``out``.

    Rows for other models or fractions are kept; rows for the same
    (model, fraction) are replaced. Output is sorted, so the files depend only
    on their contents.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {(r["model"], r["na_fraction"]): r
               for r in _read_rows(out / "metrics.csv", METRICS_FIELDS)}
    folds = {(r["model"], r["na_fraction"], r["fold"]): r
             for r in _read_rows(out / "fold_auc.csv", FOLD_FIELDS)}
    for fraction, report in exp.reports.items():
        row = dict(zip(EvalReport.CSV_FIELDS, report.csv_row()))
        row["cohort_digest"] = exp.cohort_digest
        metrics[(report.model_name, row["na_fraction"])] = row
        for k, auc in enumerate(exp.fold_aucs.get(fraction, [])):
            folds[(exp.name, _na_key(fraction), str(k))] = {
                "model": exp.name, "na_fraction": _na_key(fraction), "fold": str(k),
                "auc": f"{auc:.6f}", "cohort_digest": exp.cohort_digest}
        write_roc(roc_path(out, exp.name, fraction), report.roc_points)

    def order(key):
        return (_model_order(key[0]), key[0], *key[1:])

    _write_rows(out / "metrics.csv", METRICS_FIELDS,
                (metrics[k] for k in sorted(metrics, key=order)))
    _write_rows(out / "fold_auc.csv", FOLD_FIELDS,
                (folds[k] for k in sorted(folds, key=lambda k: order((k[0], k[1], int(k[2]))))))


def write_roc(path: Path, points: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows([f"{x:.6f}", f"{y:.6f}"] for x, y in points)


def read_roc(path: Path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["fpr", "tpr"]:
        raise ReportError(f"{path}: not a ROC file")
    return [(float(x), float(y)) for x, y in rows[1:]]


def read_metrics(out: str | Path) -> list[dict]:
    return _read_rows(Path(out) / "metrics.csv", METRICS_FIELDS)


def kruskal_table(fold_rows: Sequence[dict],
                  comparisons: Sequence[tuple[str, str]] = COMPARISONS) -> list[dict]:
    """Kruskal-Wallis on per-fold test AUCs, one row per model pair and NA level."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in fold_rows:
        groups.setdefault((r["model"], r["na_fraction"]), []).append(float(r["auc"]))
    fractions = sorted({na for _, na in groups}, key=float)
    rows = []
    for a, b in comparisons:
        for na in fractions:
            if (a, na) not in groups or (b, na) not in groups:
                continue
            ga, gb = groups[(a, na)], groups[(b, na)]
            try:
                res = kruskal_wallis([ga, gb])
                h, p = f"{res.H:.6f}", f"{res.p:.6f}"
            except MetricsError:
                h = p = "nan"
            rows.append({"group_a": a, "group_b": b, "na_fraction": na, "H": h, "p": p,
                         "n_a": str(len(ga)), "n_b": str(len(gb))})
    return rows


def plot_roc(curves: dict[str, dict[str, list[tuple[float, float]]]], path: str | Path) -> None:
    """One panel per NA fraction, one curve per model, with the chance diagonal."""
    fractions = sorted(curves, key=float)
    fig, axes = plt.subplots(1, len(fractions), figsize=(3.2 * len(fractions), 3.4),
                             squeeze=False)
    for ax, na in zip(axes[0], fractions):
        ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", linewidth=0.8)
        for model in sorted(curves[na], key=_model_order):
            pts = np.asarray(curves[na][model])
            ax.plot(pts[:, 0], pts[:, 1], linewidth=1.2, label=model)
        ax.set_title(f"NA {100 * float(na):g}%")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("false positive rate")
        ax.set_aspect("equal")
    axes[0][0].set_ylabel("true positive rate")
    axes[0][-1].legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    # fixed metadata and id salt keep the file reproducible
    with matplotlib.rc_context({"svg.hashsalt": "msnn"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_report(out: str | Path) -> dict:
    """Write ``kruskal.csv`` (when two or more models are present) and ``roc.svg``."""
    out = Path(out)
    metrics = read_metrics(out)
    if not metrics:
        raise ReportError(f"no metrics.csv rows under {out}")
    digests = {r["cohort_digest"] for r in metrics}
    if len(digests) != 1:
        raise ReportError(f"results come from different cohorts: {sorted(digests)}")
    curves: dict[str, dict[str, list]] = {}
    for r in metrics:
        path = roc_path(out, r["model"], float(r["na_fraction"]))
        if not path.exists():
            raise ReportError(f"missing ROC file {path.name}")
        curves.setdefault(r["na_fraction"], {})[r["model"]] = read_roc(path)
    plot_roc(curves, out / "roc.svg")
    models = {r["model"] for r in metrics}
    kw = []
    if len(models) > 1:
        kw = kruskal_table(_read_rows(out / "fold_auc.csv", FOLD_FIELDS))
        _write_rows(out / "kruskal.csv", KRUSKAL_FIELDS, kw)
    return {"models": sorted(models, key=_model_order), "kruskal": kw}
