"""Discrimination, calibration, recalibration, bootstrap, and stratified evaluation.

All operations consume :class:`Prediction` records (probability plus the
pre-sigmoid linear predictor, which recalibration needs) and are pure given
their seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import MetricsError
from .logistic import expit, fit_intercept_with_offset, fit_logistic, logit

AGE_BANDS = (("age_40_60", 40.0, 60.0), ("age_60_70", 60.0, 70.0),
             ("age_70_plus", 70.0, float("inf")))


@dataclass(frozen=True)
class Prediction:
    """Per-patient model output. probability = sigmoid(linear_predictor), exactly."""

    patient_id: str
    probability: float
    linear_predictor: float
    label: bool


@dataclass(frozen=True)
class Recalibrator:
    """Intercept/slope correction fitted on Test 1 linear predictors."""

    intercept: float
    slope: float


@dataclass(frozen=True)
class CalibrationBin:
    mean_predicted: float
    observed_rate: float
    count: int


@dataclass(frozen=True)
class CalibrationCurve:
    bins: tuple[CalibrationBin, ...]

    @property
    def total_count(self) -> int:
        return sum(b.count for b in self.bins)


@dataclass(frozen=True)
class BootstrapSummary:
    mean: float
    sd: float
    ci_low: float
    ci_high: float


@dataclass
class MetricsReport:
    """Metric bundle for one prediction set; fields are None where undefined."""

    n: int
    n_positive: int
    auroc: float | None = None
    auprc: float | None = None
    calibration_slope: float | None = None
    calibration_intercept: float | None = None
    curve: CalibrationCurve | None = None
    bootstrap: dict[str, BootstrapSummary] | None = None
    subgroups: dict[str, "MetricsReport"] | None = None

    @property
    def defined(self) -> bool:
        return self.auroc is not None


def _scores_labels(predictions: list[Prediction]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.probability for p in predictions], dtype=np.float64)
    labels = np.array([p.label for p in predictions], dtype=bool)
    return scores, labels


def auroc(predictions: list[Prediction]) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (positives * negatives).

    Computed via tie-averaged ranks, which matches brute-force pair counting
    exactly (both numerators are sums of halves, exact in float64).
    """
    scores, labels = _scores_labels(predictions)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("undefined AUROC: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average of 1-based ranks i+1..j+1
        i = j + 1
    rank_sum = ranks[labels].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(predictions: list[Prediction]) -> float:
    """Average precision: mean of precision-at-rank over positives.

    Ranking is by descending score with ties broken by ascending patient_id,
    so the statistic is deterministic on tied scores.
    """
    ordered = sorted(predictions, key=lambda p: (-p.probability, p.patient_id))
    n_pos = sum(p.label for p in ordered)
    if n_pos == 0:
        raise MetricsError("undefined AUPRC: no positives")
    tp = 0
    total = 0.0
    for rank, pred in enumerate(ordered, start=1):
        if pred.label:
            tp += 1
            total += tp / rank
    return total / n_pos


def _check_probabilities(scores: np.ndarray) -> None:
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise MetricsError("probabilities must lie strictly inside (0, 1)")


def calibration_slope_intercept(predictions: list[Prediction]) -> tuple[float, float]:
    """Slope from regressing labels on logit(p), and the calibration-in-the-large
    intercept (fitted with the slope fixed at 1)."""
    scores, labels = _scores_labels(predictions)
    _check_probabilities(scores)
    if labels.all() or not labels.any():
        raise MetricsError("degenerate calibration: only one outcome class present")
    if np.all(scores == scores[0]):
        raise MetricsError("degenerate calibration: constant predictions")
    eta = logit(scores)
    fit = fit_logistic(eta[:, None], labels.astype(float))
    slope = float(fit.coefficients[1])
    intercept = fit_intercept_with_offset(eta, labels.astype(float))
    return slope, intercept


def calibration_curve(predictions: list[Prediction], n_bins: int = 10) -> CalibrationCurve:
    """Equal-width probability bins on [0, 1]; empty bins are omitted."""
    scores, labels = _scores_labels(predictions)
    idx = np.minimum((scores * n_bins).astype(int), n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        bins.append(CalibrationBin(mean_predicted=float(scores[mask].mean()),
                                   observed_rate=float(labels[mask].mean()),
                                   count=count))
    return CalibrationCurve(bins=tuple(bins))


def recalibrate_fit(test1_predictions: list[Prediction]) -> Recalibrator:
    """Fit labels ~ a + b * linear_predictor by logistic regression on Test 1."""
    labels = np.array([p.label for p in test1_predictions], dtype=np.float64)
    if labels.all() or not labels.any():
        raise MetricsError("cannot recalibrate: Test 1 has a single outcome class")
    eta = np.array([p.linear_predictor for p in test1_predictions], dtype=np.float64)
    fit = fit_logistic(eta[:, None], labels)
    return Recalibrator(intercept=float(fit.coefficients[0]),
                        slope=float(fit.coefficients[1]))


def recalibrate_apply(recal: Recalibrator,
                      predictions: list[Prediction]) -> list[Prediction]:
    """Map each prediction through eta' = a + b * eta, p' = sigmoid(eta').

    With b > 0 the transform is strictly increasing, so rank order and hence
    AUROC are unchanged.
    """
    out = []
    for p in predictions:
        eta = recal.intercept + recal.slope * p.linear_predictor
        out.append(replace(p, linear_predictor=float(eta),
                           probability=float(expit(np.array([eta]))[0])))
    return out


BOOTSTRAP_METRICS = ("auroc", "auprc", "calibration_slope")


def _metric_value(name: str, predictions: list[Prediction]) -> float:
    if name == "auroc":
        return auroc(predictions)
    if name == "auprc":
        return auprc(predictions)
    if name == "calibration_slope":
        return calibration_slope_intercept(predictions)[0]
    raise MetricsError(f"unknown bootstrap metric {name!r}")


def bootstrap_metrics(predictions: list[Prediction], n_boot: int = 500,
                      seed: int = 0) -> dict[str, BootstrapSummary]:
    """Stratified bootstrap (resampling positives and negatives separately).

    Stratification guarantees both classes appear in every replicate, keeping
    AUROC defined. Replicates where a metric still fails (e.g. a degenerate
    calibration fit) contribute NaN and are ignored by the nan-aware
    aggregation. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    positives = [p for p in predictions if p.label]
    negatives = [p for p in predictions if not p.label]
    if not positives or not negatives:
        raise MetricsError("bootstrap needs both outcome classes")
    values = {name: np.empty(n_boot) for name in BOOTSTRAP_METRICS}
    for b in range(n_boot):
        pos_idx = rng.integers(0, len(positives), size=len(positives))
        neg_idx = rng.integers(0, len(negatives), size=len(negatives))
        sample = [positives[i] for i in pos_idx] + [negatives[i] for i in neg_idx]
        for name in BOOTSTRAP_METRICS:
            try:
                values[name][b] = _metric_value(name, sample)
            except MetricsError:
                values[name][b] = np.nan
    summaries = {}
    for name, vals in values.items():
        if np.all(np.isnan(vals)):
            summaries[name] = BootstrapSummary(np.nan, np.nan, np.nan, np.nan)
            continue
        lo, hi = np.nanpercentile(vals, [2.5, 97.5])
        summaries[name] = BootstrapSummary(mean=float(np.nanmean(vals)),
                                           sd=float(np.nanstd(vals)),
                                           ci_low=float(lo), ci_high=float(hi))
    return summaries


def compute_report(predictions: list[Prediction], n_bins: int = 10,
                   n_boot: int | None = None, seed: int = 0) -> MetricsReport:
    """Assemble a MetricsReport, leaving individual metrics None where undefined."""
    labels = [p.label for p in predictions]
    report = MetricsReport(n=len(predictions), n_positive=int(sum(labels)))
    if not predictions:
        return report
    try:
        report.auroc = auroc(predictions)
    except MetricsError:
        pass
    try:
        report.auprc = auprc(predictions)
    except MetricsError:
        pass
    try:
        slope, intercept = calibration_slope_intercept(predictions)
        report.calibration_slope = slope
        report.calibration_intercept = intercept
    except MetricsError:
        pass
    report.curve = calibration_curve(predictions, n_bins=n_bins)
    if n_boot and report.auroc is not None:
        report.bootstrap = bootstrap_metrics(predictions, n_boot=n_boot, seed=seed)
    return report


@dataclass(frozen=True)
class PatientAttributes:
    """Demographic attributes at prediction time, used for stratification."""

    sex: str
    age_at_prediction: float
    imd_quintile: int


def stratified_evaluation(predictions: list[Prediction],
                          attributes: dict[str, PatientAttributes],
                          n_bins: int = 10) -> dict[str, MetricsReport]:
    """Per-subgroup reports: sex, age bands [40,60) / [60,70) / [70,inf), IMD quintiles.

    Subgroups lacking both outcome classes yield reports with undefined
    (None) metric fields rather than numbers.
    """
    def subset(pred_filter) -> list[Prediction]:
        return [p for p in predictions if pred_filter(attributes[p.patient_id])]

    groups: dict[str, MetricsReport] = {}
    groups["female"] = compute_report(subset(lambda a: a.sex == "F"), n_bins)
    groups["male"] = compute_report(subset(lambda a: a.sex == "M"), n_bins)
    for name, lo, hi in AGE_BANDS:
        groups[name] = compute_report(
            subset(lambda a, lo=lo, hi=hi: lo <= a.age_at_prediction < hi), n_bins)
    for q in range(1, 6):
        groups[f"imd_{q}"] = compute_report(
            subset(lambda a, q=q: a.imd_quintile == q), n_bins)
    return groups


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def report_to_dict(report: MetricsReport) -> dict:
    doc: dict = {"n": report.n, "n_positive": report.n_positive,
                 "auroc": report.auroc, "auprc": report.auprc,
                 "calibration_slope": report.calibration_slope,
                 "calibration_intercept": report.calibration_intercept}
    if report.curve is not None:
        doc["calibration_curve"] = [
            {"mean_predicted": b.mean_predicted, "observed_rate": b.observed_rate,
             "count": b.count} for b in report.curve.bins]
    if report.bootstrap is not None:
        doc["bootstrap"] = {
            name: {"mean": s.mean, "sd": s.sd, "ci_low": s.ci_low, "ci_high": s.ci_high}
            for name, s in report.bootstrap.items()}
    if report.subgroups is not None:
        doc["subgroups"] = {name: report_to_dict(sub)
                            for name, sub in report.subgroups.items()}
    return doc


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True,
                      allow_nan=True) + "\n"


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    return repr(float(value))


def report_to_csv(report: MetricsReport, subgroup: str = "") -> str:
    """Flat CSV: metric,value,sd,ci_low,ci_high,subgroup."""
    lines = ["metric,value,sd,ci_low,ci_high,subgroup"]
    lines.extend(_report_rows(report, subgroup))
    return "\n".join(lines) + "\n"


def _report_rows(report: MetricsReport, subgroup: str) -> list[str]:
    rows = []
    for name, value in (("auroc", report.auroc), ("auprc", report.auprc),
                        ("calibration_slope", report.calibration_slope),
                        ("calibration_intercept", report.calibration_intercept)):
        boot = (report.bootstrap or {}).get(name)
        if boot is not None:
            rows.append(f"{name},{_fmt(value)},{_fmt(boot.sd)},"
                        f"{_fmt(boot.ci_low)},{_fmt(boot.ci_high)},{subgroup}")
        else:
            rows.append(f"{name},{_fmt(value)},,,,{subgroup}")
    for name, sub in (report.subgroups or {}).items():
        rows.extend(_report_rows(sub, name))
    return rows


def curve_to_csv(curve: CalibrationCurve) -> str:
    """Calibration curve CSV: bin,mean_pred,obs_rate,count."""
    lines = ["bin,mean_pred,obs_rate,count"]
    for i, b in enumerate(curve.bins):
        lines.append(f"{i},{b.mean_predicted!r},{b.observed_rate!r},{b.count}")
    return "\n".join(lines) + "\n"
