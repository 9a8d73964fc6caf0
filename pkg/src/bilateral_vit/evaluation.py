"""Localisation accuracy under the optic-disc-radius rule, stratified by disease status."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .types import STRATA, DiseaseStatus, EvalReport, EvalThresholds, FundusSample


def is_hit(gt_xy, pred_xy, R: float, multiplier: float) -> bool:
    """True when the prediction lies within ``multiplier * R`` of the ground truth (inclusive)."""
    if R <= 0:
        raise ValueError("R must be positive")
    return math.hypot(gt_xy[0] - pred_xy[0], gt_xy[1] - pred_xy[1]) <= multiplier * R


def _pred_xy(p):
    if hasattr(p, "xy"):
        return p.xy
    return (float(p[0]), float(p[1]))


def evaluate(predictions: Mapping, samples: Sequence[FundusSample], thresholds: EvalThresholds,
             train_dataset=None, test_dataset=None) -> EvalReport:
    """Score ``predictions`` (id -> Prediction or (x, y), original pixels) against ``samples``."""
    missing = [s.id for s in samples if s.id not in predictions]
    if missing:
        raise KeyError(f"missing predictions for {len(missing)} sample(s): {', '.join(missing)}")
    if not samples:
        raise ValueError("no samples to evaluate")
    gt = np.array([s.fovea_xy for s in samples], dtype=np.float64)
    pred = np.array([_pred_xy(predictions[s.id]) for s in samples], dtype=np.float64)
    radius = np.array([s.disc_radius_R for s in samples], dtype=np.float64)
    diseased = np.array([s.disease_status is DiseaseStatus.DISEASED for s in samples])
    dist = np.hypot(gt[:, 0] - pred[:, 0], gt[:, 1] - pred[:, 1])

    masks = {"overall": np.ones(len(samples), dtype=bool), "normal": ~diseased, "diseased": diseased}
    hits = {}
    for m in thresholds.multipliers:
        hit = dist <= m * radius
        hits[m] = {name: int(np.count_nonzero(hit & mask)) for name, mask in masks.items()}
    return EvalReport(
        thresholds=thresholds,
        hits=hits,
        n_samples={name: int(mask.sum()) for name, mask in masks.items()},
        mean_pixel_error=float(dist.mean()),
        train_dataset=train_dataset,
        test_dataset=test_dataset,
        per_sample_error={s.id: float(d) for s, d in zip(samples, dist)},
    )


def _fmt_pct(value, decimals: int) -> str:
    if value is None:
        return "-"
    return f"{value:.{decimals}f}"


def _decimals(thresholds: EvalThresholds) -> int:
    # PALM results are conventionally reported as whole percentages.
    return 0 if thresholds.name == "palm" else 2


def format_table(report: EvalReport, row_label: str = "model", decimals=None) -> str:
    """Plain-text accuracy table: one row per stratum, one column per threshold."""
    decimals = _decimals(report.thresholds) if decimals is None else decimals
    headers = [row_label] + [f"{lab} (%)" for lab in report.thresholds.labels] + ["n"]
    rows = []
    for stratum in STRATA:
        rows.append(
            [stratum]
            + [_fmt_pct(report.accuracy(m, stratum), decimals) for m in report.thresholds.multipliers]
            + [str(report.n_samples[stratum])]
        )
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = []
    if report.train_dataset or report.test_dataset:
        lines.append(f"train: {report.train_dataset or '-'}  test: {report.test_dataset or '-'}")
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    lines.append(f"mean pixel error (original resolution): {report.mean_pixel_error:.2f}")
    return "\n".join(lines) + "\n"


def format_comparison(reports: Mapping[str, EvalReport], stratum: str = "overall") -> str:
    """One row per model, Table-3 style, plus the mean pixel error column."""
    reports = dict(reports)
    first = next(iter(reports.values()))
    decimals = _decimals(first.thresholds)
    headers = ["model"] + [f"{lab} (%)" for lab in first.thresholds.labels] + ["error (px)"]
    rows = [
        [name]
        + [_fmt_pct(r.accuracy(m, stratum), decimals) for m in r.thresholds.multipliers]
        + [f"{r.mean_pixel_error:.2f}"]
        for name, r in reports.items()
    ]
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    return "\n".join(lines) + "\n"


CSV_FIELDS = ("multiplier", "stratum", "hits", "total", "accuracy_pct")


def report_to_csv(report: EvalReport) -> str:
    """CSV with one row per (multiplier, stratum); ``#``-prefixed metadata lines come first."""
    buf = io.StringIO()
    buf.write(f"# thresholds={report.thresholds.name}\n")
    buf.write(f"# mean_pixel_error={report.mean_pixel_error!r}\n")
    if report.train_dataset is not None:
        buf.write(f"# train_dataset={report.train_dataset}\n")
    if report.test_dataset is not None:
        buf.write(f"# test_dataset={report.test_dataset}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for m in report.thresholds.multipliers:
        for stratum in STRATA:
            acc = report.accuracy(m, stratum)
            writer.writerow([
                str(Fraction(m).limit_denominator(64)),
                stratum,
                report.hits[m][stratum],
                report.n_samples[stratum],
                "" if acc is None else f"{acc:.6f}",
            ])
    return buf.getvalue()


def report_from_csv(text: str) -> EvalReport:
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.strip():
            body.append(line)
    rows = list(csv.DictReader(body))
    multipliers = []
    hits, totals = {}, {}
    for r in rows:
        m = float(Fraction(r["multiplier"]))
        if m not in hits:
            multipliers.append(m)
            hits[m] = {}
        hits[m][r["stratum"]] = int(r["hits"])
        totals[r["stratum"]] = int(r["total"])
    name = meta.get("thresholds", "custom")
    return EvalReport(
        thresholds=EvalThresholds(tuple(multipliers), name=name),
        hits=hits,
        n_samples=totals,
        mean_pixel_error=float(meta.get("mean_pixel_error", "nan")),
        train_dataset=meta.get("train_dataset"),
        test_dataset=meta.get("test_dataset"),
    )


def plot_report(report: EvalReport, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ms = report.thresholds.multipliers
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for stratum, style in zip(STRATA, ("-o", "--s", ":^")):
        acc = [report.accuracy(m, stratum) for m in ms]
        if any(a is None for a in acc):
            continue
        ax.plot(range(len(ms)), acc, style, label=f"{stratum} (n={report.n_samples[stratum]})")
    ax.set_xticks(range(len(ms)))
    ax.set_xticklabels(report.thresholds.labels)
    ax.set_xlabel("distance threshold")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 101)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    title = report.test_dataset or ""
    if report.train_dataset and report.train_dataset != report.test_dataset:
        title = f"{report.train_dataset} -> {report.test_dataset}"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def emit_report(report: EvalReport, out_dir, formats=("text", "csv", "plot"), stem: str = "report") -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "text":
            p = out / f"{stem}.txt"
            p.write_text(format_table(report))
        elif fmt == "csv":
            p = out / f"{stem}.csv"
            p.write_text(report_to_csv(report))
        elif fmt == "plot":
            p = plot_report(report, out / f"{stem}.png")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    return written


def cross_dataset_eval(checkpoint, samples: Sequence[FundusSample], thresholds: EvalThresholds,
                       vessel_provider=None, vessel_source=None, train_dataset=None, test_dataset=None,
                       mean=None, std=None):
    """Predict every sample with a saved model and score it, tagging both dataset names.

    Returns ``(report, predictions)``.
    """
    from .inference import predict
    from .network import load_model, read_checkpoint

    payload = read_checkpoint(checkpoint)
    model = load_model(checkpoint)
    train_dataset = train_dataset or payload.get("dataset_tag")
    norm = payload.get("normalization") or {}
    kwargs = {}
    if mean is not None or "mean" in norm:
        kwargs = dict(mean=mean or norm["mean"], std=std or norm["std"])
    preds = {
        s.id: predict(model, s, vessel_source, vessel_provider=vessel_provider, **kwargs)
        for s in samples
    }
    if test_dataset is None and samples:
        test_dataset = samples[0].dataset_tag
    return evaluate(preds, samples, thresholds, train_dataset, test_dataset), preds
