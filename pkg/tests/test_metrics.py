"""Discrimination/calibration metrics against brute-force and simulation oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgcnn import metrics as MX
from tgcnn.errors import MetricsError
from tgcnn.logistic import expit, fit_logistic, logit
from tgcnn.metrics import (PatientAttributes, Prediction, auprc, auroc,
                           bootstrap_metrics, calibration_curve,
                           calibration_slope_intercept, recalibrate_apply,
                           recalibrate_fit, stratified_evaluation)


def preds(scores, labels, etas=None):
    if etas is None:
        etas = [float(logit(np.clip(s, 1e-9, 1 - 1e-9))) for s in scores]
    return [Prediction(patient_id=f"P{i:04d}", probability=float(s),
                       linear_predictor=float(e), label=bool(y))
            for i, (s, y, e) in enumerate(zip(scores, labels, etas))]


def brute_force_auroc(scores, labels):
    """Pairwise counting oracle: concordant + half of ties over all pos/neg pairs."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def test_auroc_perfect_separation():
    assert auroc(preds([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0


def test_auroc_all_ties_is_half():
    assert auroc(preds([0.4] * 6, [1, 0, 1, 0, 0, 1])) == 0.5


def test_auroc_worked_example():
    assert auroc(preds([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75


def test_auroc_single_class_raises():
    with pytest.raises(MetricsError, match="undefined AUROC"):
        auroc(preds([0.1, 0.2], [1, 1]))


def test_auroc_matches_brute_force_exactly_on_random_instances():
    rng = np.random.default_rng(123)
    for _ in range(300):
        n = int(rng.integers(2, 60))
        labels = rng.random(n) < rng.uniform(0.2, 0.8)
        if labels.all() or not labels.any():
            continue
        # quantised scores force plenty of ties
        scores = np.round(rng.random(n), 2)
        p = preds(scores, labels)
        assert auroc(p) == brute_force_auroc(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.001, 0.999), st.booleans()),
                min_size=4, max_size=40))
def test_auroc_invariant_under_monotone_transform(items):
    labels = [y for _, y in items]
    if not (any(labels) and not all(labels)):
        return
    # quantise so the float transform stays injective (a strictly increasing
    # map can otherwise collapse adjacent float scores into new ties)
    scores = np.round(np.array([s for s, _ in items]), 3)
    scores = np.clip(scores, 0.001, 0.999)
    base = auroc(preds(scores, labels))
    squeezed = expit(3.0 * logit(scores) + 0.7)   # strictly increasing map
    assert auroc(preds(squeezed, labels)) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# AUPRC (average precision)
# ---------------------------------------------------------------------------

def test_auprc_perfect_ranking():
    assert auprc(preds([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0


def test_auprc_worked_example():
    assert auprc(preds([0.2, 0.9], [1, 0])) == 0.5


def test_auprc_rank_walk_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(3, 50))
        labels = rng.random(n) < 0.4
        if not labels.any():
            continue
        scores = np.round(rng.random(n), 1)
        p = preds(scores, labels)

        ordered = sorted(p, key=lambda q: (-q.probability, q.patient_id))
        total = 0.0
        for rank in range(1, n + 1):
            if ordered[rank - 1].label:
                hits = sum(q.label for q in ordered[:rank])
                total += hits / rank
        expected = total / sum(labels)
        assert auprc(p) == expected


def test_auprc_converges_to_prevalence_for_random_scores():
    rng = np.random.default_rng(11)
    n, prevalence = 20_000, 0.3
    labels = rng.random(n) < prevalence
    scores = rng.random(n)
    assert auprc(preds(scores, labels)) == pytest.approx(prevalence, abs=0.02)


def test_auprc_is_one_iff_positives_outrank_negatives():
    p_good = preds([0.9, 0.7, 0.3], [1, 1, 0])
    assert auprc(p_good) == 1.0
    p_bad = preds([0.9, 0.7, 0.8], [1, 1, 0])
    assert auprc(p_bad) < 1.0


def test_auprc_tie_break_is_deterministic():
    a = preds([0.5, 0.5], [1, 0])
    assert auprc(a) == 1.0   # tie broken by ascending patient_id: P0000 first


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def simulate_calibrated(n, seed, slope_factor=1.0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.02, 0.98, n)
    true_p = expit(slope_factor * logit(p))
    labels = rng.random(n) < true_p
    return preds(p, labels)


def test_calibration_slope_recovers_unit_slope():
    slope, intercept = calibration_slope_intercept(simulate_calibrated(20_000, 1))
    assert slope == pytest.approx(1.0, abs=0.05)
    assert intercept == pytest.approx(0.0, abs=0.05)


def test_calibration_slope_recovers_double_slope():
    slope, _ = calibration_slope_intercept(simulate_calibrated(20_000, 2,
                                                               slope_factor=2.0))
    assert slope == pytest.approx(2.0, abs=0.1)


def test_calibration_intercept_fixed_slope_detects_shift():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, 20_000)
    labels = rng.random(len(p)) < expit(logit(p) - 1.0)   # under-risked by 1 logit
    _, intercept = calibration_slope_intercept(preds(p, labels))
    assert intercept == pytest.approx(-1.0, abs=0.07)


def test_calibration_degenerate_inputs_raise():
    with pytest.raises(MetricsError, match="degenerate"):
        calibration_slope_intercept(preds([0.3] * 10, [0, 1] * 5))
    with pytest.raises(MetricsError):
        calibration_slope_intercept(preds([0.2, 0.4], [1, 1]))


def test_calibration_curve_bins_and_counts():
    rng = np.random.default_rng(5)
    n = 5000
    p = rng.uniform(0.01, 0.99, n)
    labels = rng.random(n) < p
    curve = calibration_curve(preds(p, labels))
    assert curve.total_count == n
    for b in curve.bins:
        assert 0.0 <= b.observed_rate <= 1.0
        se = max(np.sqrt(b.mean_predicted * (1 - b.mean_predicted) / b.count), 1e-3)
        assert abs(b.observed_rate - b.mean_predicted) <= 4 * se


def test_calibration_curve_single_bin():
    curve = calibration_curve(preds([0.55, 0.56, 0.57], [1, 0, 1]))
    assert len(curve.bins) == 1
    assert curve.bins[0].count == 3


# ---------------------------------------------------------------------------
# recalibration
# ---------------------------------------------------------------------------

def test_recalibrate_fit_recovers_identity():
    recal = recalibrate_fit(simulate_calibrated(20_000, 4))
    assert recal.slope == pytest.approx(1.0, abs=0.05)
    assert recal.intercept == pytest.approx(0.0, abs=0.05)


def test_recalibrate_fit_halves_doubled_predictors():
    rng = np.random.default_rng(6)
    eta_true = rng.normal(0, 1.5, 20_000)
    labels = rng.random(eta_true.size) < expit(eta_true)
    overconfident = preds(expit(2.0 * eta_true), labels, etas=2.0 * eta_true)
    recal = recalibrate_fit(overconfident)
    assert recal.slope == pytest.approx(0.5, abs=0.05)


def test_recalibrate_fit_single_class_raises():
    with pytest.raises(MetricsError):
        recalibrate_fit(preds([0.2, 0.6], [1, 1]))


def test_recalibrate_apply_identity():
    p = simulate_calibrated(50, 7)
    out = recalibrate_apply(MX.Recalibrator(intercept=0.0, slope=1.0), p)
    for a, b in zip(p, out):
        assert b.probability == pytest.approx(a.probability, rel=1e-12)
        assert b.linear_predictor == pytest.approx(a.linear_predictor, rel=1e-12)


def test_recalibrate_apply_analytic_point():
    p = preds([expit(np.array([2.0]))[0]], [1], etas=[2.0])
    out = recalibrate_apply(MX.Recalibrator(intercept=-1.0, slope=0.5), p)
    assert out[0].linear_predictor == pytest.approx(0.0)
    assert out[0].probability == pytest.approx(0.5)


def test_recalibrate_preserves_auroc_exactly():
    p = simulate_calibrated(500, 8)
    out = recalibrate_apply(MX.Recalibrator(intercept=-2.3, slope=0.4), p)
    assert auroc(out) == auroc(p)


def test_recalibration_in_sample_fixed_point():
    p = simulate_calibrated(20_000, 9, slope_factor=0.6)
    recal = recalibrate_fit(p)
    slope_after, _ = calibration_slope_intercept(recalibrate_apply(recal, p))
    assert slope_after == pytest.approx(1.0, abs=0.02)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def test_bootstrap_single_replicate():
    p = simulate_calibrated(300, 10)
    summary = bootstrap_metrics(p, n_boot=1, seed=0)
    assert summary["auroc"].sd == 0.0
    assert summary["auroc"].ci_low == summary["auroc"].ci_high == \
        summary["auroc"].mean


def test_bootstrap_deterministic_per_seed():
    p = simulate_calibrated(200, 11)
    a = bootstrap_metrics(p, n_boot=50, seed=3)
    b = bootstrap_metrics(p, n_boot=50, seed=3)
    assert a == b
    c = bootstrap_metrics(p, n_boot=50, seed=4)
    assert c["auroc"].mean != a["auroc"].mean


def test_bootstrap_ci_contains_point_estimate_usually():
    hits = 0
    runs = 20
    for seed in range(runs):
        p = simulate_calibrated(400, 100 + seed)
        point = auroc(p)
        summary = bootstrap_metrics(p, n_boot=200, seed=seed)["auroc"]
        assert summary.ci_low <= summary.ci_high
        if summary.ci_low <= point <= summary.ci_high:
            hits += 1
    assert hits >= 0.9 * runs


def test_bootstrap_keeps_both_classes_despite_imbalance():
    rng = np.random.default_rng(12)
    scores = rng.uniform(0.01, 0.99, 100)
    labels = np.zeros(100, dtype=bool)
    labels[:3] = True   # rare positives: unstratified resampling would drop them
    summary = bootstrap_metrics(preds(scores, labels), n_boot=100, seed=1)
    assert np.isfinite(summary["auroc"].mean)


# ---------------------------------------------------------------------------
# stratified evaluation
# ---------------------------------------------------------------------------

def attributes_for(p, sex="F", age=65.0, imd=3):
    return {q.patient_id: PatientAttributes(sex=sex, age_at_prediction=age,
                                            imd_quintile=imd) for q in p}


def test_stratified_marks_empty_subgroups_undefined():
    p = simulate_calibrated(200, 13)
    groups = stratified_evaluation(p, attributes_for(p, sex="F"))
    assert groups["male"].n == 0
    assert groups["male"].auroc is None and not groups["male"].defined
    assert groups["female"].defined


def test_stratified_age_sixty_goes_to_middle_band():
    p = simulate_calibrated(100, 14)
    groups = stratified_evaluation(p, attributes_for(p, age=60.0))
    assert groups["age_60_70"].n == len(p)
    assert groups["age_40_60"].n == 0
    assert groups["age_70_plus"].n == 0


def test_stratified_axis_counts_sum_to_n():
    p = simulate_calibrated(500, 15)
    rng = np.random.default_rng(16)
    attrs = {q.patient_id: PatientAttributes(
        sex="F" if rng.random() < 0.6 else "M",
        age_at_prediction=float(rng.uniform(40, 90)),
        imd_quintile=int(rng.integers(1, 6))) for q in p}
    groups = stratified_evaluation(p, attrs)
    n = len(p)
    assert groups["female"].n + groups["male"].n == n
    assert sum(groups[k].n for k in ("age_40_60", "age_60_70", "age_70_plus")) == n
    assert sum(groups[f"imd_{q}"].n for q in range(1, 6)) == n


# ---------------------------------------------------------------------------
# report structures and serialization
# ---------------------------------------------------------------------------

def test_report_serialization_round_trip_shapes():
    p = simulate_calibrated(300, 17)
    report = MX.compute_report(p, n_boot=25, seed=2)
    report.subgroups = stratified_evaluation(p, attributes_for(p))
    doc = MX.report_to_dict(report)
    assert set(doc["bootstrap"]) == {"auroc", "auprc", "calibration_slope"}
    assert "subgroups" in doc and "female" in doc["subgroups"]
    csv_text = MX.report_to_csv(report)
    assert csv_text.startswith("metric,value,sd,ci_low,ci_high,subgroup")
    assert "undefined" in csv_text or "auroc" in csv_text
    curve_text = MX.curve_to_csv(report.curve)
    assert curve_text.splitlines()[0] == "bin,mean_pred,obs_rate,count"


def test_prediction_probability_matches_sigmoid_of_eta():
    p = simulate_calibrated(100, 18)
    for q in p:
        assert q.probability == pytest.approx(float(expit(np.array([q.linear_predictor]))[0]),
                                              rel=1e-12)


def test_slope_standard_error_available_from_fit():
    p = simulate_calibrated(5000, 19)
    eta = np.array([q.linear_predictor for q in p])
    y = np.array([float(q.label) for q in p])
    fit = fit_logistic(eta[:, None], y)
    assert fit.standard_errors is not None
    assert 0 < fit.standard_errors[1] < 0.2
