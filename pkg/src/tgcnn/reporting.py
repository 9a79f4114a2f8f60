"""Consolidated run report: cohort characteristics, CV/ablation tables,
held-out metrics, and calibration-curve data, assembled from run artifacts.

The report is regenerated purely from the run directory contents (no
timestamps), so rebuilding it is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import cohort as C


def _age_years(h: C.PatientHistory, horizon_months: int) -> float:
    return C.age_at(h.demographics, C.prediction_date(h, horizon_months))


def cohort_characteristics(partitions: dict[str, list[C.PatientHistory]],
                           horizon_months: int) -> str:
    """Markdown table of counts by sex/outcome, age stats, and IMD quintiles."""
    names = list(partitions)
    lines = ["| Characteristic | " + " | ".join(f"{n} (N={len(partitions[n])})"
                                                for n in names) + " |",
             "|---" * (len(names) + 1) + "|"]

    def row(label, fn):
        lines.append(f"| {label} | " + " | ".join(fn(partitions[n]) for n in names) + " |")

    def pct(count, total):
        return f"{count} ({100.0 * count / total:.1f}%)" if total else "0"

    row("Sex: female", lambda hs: pct(sum(h.demographics.sex == "F" for h in hs), len(hs)))
    row("Outcome events", lambda hs: pct(sum(h.label for h in hs), len(hs)))

    def age_stats(hs):
        if not hs:
            return "-"
        ages = np.array([_age_years(h, horizon_months) for h in hs])
        return (f"{ages.mean():.1f} ({ages.std():.1f}); "
                f"median {np.median(ages):.0f} ({ages.min():.0f},{ages.max():.0f})")

    row("Age at prediction, y: mean (SD); median (min,max)", age_stats)

    def replace_age(hs):
        ages = [C.age_at(h.demographics, h.replacement_date)
                for h in hs if h.replacement_date is not None]
        if not ages:
            return "-"
        arr = np.array(ages)
        return f"{arr.mean():.1f} ({arr.std():.1f})"

    row("Age at replacement, y: mean (SD)", replace_age)
    for q in range(1, 6):
        row(f"IMD quintile {q}" + (" (most deprived)" if q == 1 else
                                   " (least deprived)" if q == 5 else ""),
            lambda hs, q=q: pct(sum(h.demographics.imd_quintile == q for h in hs),
                                len(hs)))

    def events_stats(hs):
        if not hs:
            return "-"
        counts = np.array([sum(len(codes) for _, codes in h.visits) for h in hs])
        return f"{counts.mean():.1f} ({counts.std():.1f})"

    row("Events recorded: mean (SD)", events_stats)
    return "\n".join(lines) + "\n"


def _csv_as_markdown(path: Path) -> str:
    rows = [line.split(",") for line in path.read_text().strip().splitlines()]
    out = ["| " + " | ".join(rows[0]) + " |", "|---" * len(rows[0]) + "|"]
    out.extend("| " + " | ".join(r) + " |" for r in rows[1:])
    return "\n".join(out) + "\n"


def _metrics_summary(path: Path) -> str:
    doc = json.loads(path.read_text())
    lines = ["| metric | value | 95% CI |", "|---|---|---|"]
    boot = doc.get("bootstrap", {})
    for name in ("auroc", "auprc", "calibration_slope", "calibration_intercept"):
        value = doc.get(name)
        text = "undefined" if value is None else f"{value:.4f}"
        b = boot.get(name)
        ci = f"({b['ci_low']:.3f}, {b['ci_high']:.3f})" if b else "-"
        lines.append(f"| {name} | {text} | {ci} |")
    return "\n".join(lines) + "\n"


def emit_report(cfg, run_dir: Path) -> Path:
    """Write report.md summarising whatever artifacts exist in the run directory."""
    from .cli import _load_split  # late import to avoid a module cycle

    sections = [f"# Run report `{run_dir.name}`", "",
                "Configuration: [resolved.cfg](resolved.cfg)", ""]

    if (run_dir / "manifest.json").exists():
        split, _ = _load_split(cfg, run_dir)
        sections += ["## Cohort characteristics", "",
                     cohort_characteristics(
                         {"matched train": split.matched_train,
                          "test1": split.test1, "test2": split.test2},
                         cfg["horizon_months"]),
                     f"Matched pairs: {len(split.pairs)}; unmatched cases: "
                     f"{len(split.unmatched_case_ids)}", ""]

    for title, name in (("Cross-validation", "cv_table.csv"),
                        ("Ablation study", "ablation.csv"),
                        ("Baseline comparison", "baselines.csv"),
                        ("Hyperparameter search", "search_trials.csv")):
        path = run_dir / name
        if path.exists():
            sections += [f"## {title}", "", _csv_as_markdown(path), ""]

    for title, name in (("Test 2 metrics (before recalibration)",
                         "metrics_test2_before_recal.json"),
                        ("Test 2 metrics (recalibrated)",
                         "metrics_test2_recalibrated.json"),
                        ("Test 2 metrics", "metrics_test2.json"),
                        ("Test 1 metrics", "metrics_test1.json")):
        path = run_dir / name
        if path.exists():
            sections += [f"## {title}", "", _metrics_summary(path), ""]

    for title, name in (("Calibration curve: Test 1 before recalibration",
                         "calibration_test1_before.csv"),
                        ("Calibration curve: Test 2 after recalibration",
                         "calibration_test2_after.csv")):
        path = run_dir / name
        if path.exists():
            sections += [f"## {title}", "", _csv_as_markdown(path), ""]

    if (run_dir / "stratified.csv").exists():
        sections += ["## Subgroup metrics (Test 2)", "",
                     _csv_as_markdown(run_dir / "stratified.csv"), ""]

    out = run_dir / "report.md"
    out.write_text("\n".join(sections))
    return out
