"""Cohort ingestion, synthesis, windowing, matching, and split protocol."""

import datetime as dt
from pathlib import Path

import numpy as np
import pytest

from tgcnn import cohort as C
from tgcnn.errors import ConfigError, DataError

DEMO = C.Demographics(sex="F", birth_year=1950, imd_quintile=3)


def write(tmp_path: Path, name: str, lines: list[str]) -> Path:
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def csv_trio(tmp_path, events, demographics, outcomes):
    return (write(tmp_path, "events.csv", ["patient_id,date,code"] + events),
            write(tmp_path, "demographics.csv",
                  ["patient_id,sex,birth_year,imd_quintile"] + demographics),
            write(tmp_path, "outcomes.csv", ["patient_id,replacement_date"] + outcomes))


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def test_same_date_events_merge_into_one_visit(tmp_path):
    e, d, o = csv_trio(tmp_path,
                       ["P1,2010-01-05,X1", "P1,2010-01-05,X2"],
                       ["P1,F,1950,3"], [])
    histories = C.ingest_cohort(e, d, o)
    assert len(histories) == 1
    assert histories[0].visits == [(dt.date(2010, 1, 5), frozenset({"X1", "X2"}))]


def test_unknown_patient_in_outcomes_rejected(tmp_path):
    e, d, o = csv_trio(tmp_path, ["P1,2010-01-05,X1"], ["P1,F,1950,3"],
                       ["P9,2012-01-01"])
    with pytest.raises(DataError, match="unknown patient"):
        C.ingest_cohort(e, d, o)


def test_unknown_patient_in_events_rejected(tmp_path):
    e, d, o = csv_trio(tmp_path, ["P2,2010-01-05,X1"], ["P1,F,1950,3"], [])
    with pytest.raises(DataError, match="unknown patient"):
        C.ingest_cohort(e, d, o)


def test_patient_with_no_events_gets_empty_visits(tmp_path):
    e, d, o = csv_trio(tmp_path, [], ["P1,M,1945,2"], [])
    histories = C.ingest_cohort(e, d, o)
    assert histories[0].visits == []
    assert histories[0].label is False


def test_duplicate_event_rows_dedupe_silently(tmp_path):
    e, d, o = csv_trio(tmp_path,
                       ["P1,2010-01-05,X1", "P1,2010-01-05,X1"],
                       ["P1,F,1950,3"], [])
    histories = C.ingest_cohort(e, d, o)
    assert histories[0].visits == [(dt.date(2010, 1, 5), frozenset({"X1"}))]


def test_malformed_date_names_file_line_column(tmp_path):
    e, d, o = csv_trio(tmp_path, ["P1,zzz,X1"], ["P1,F,1950,3"], [])
    with pytest.raises(DataError, match=r"events\.csv.*line 2.*column date"):
        C.ingest_cohort(e, d, o)


def test_bad_sex_and_bad_imd_rejected(tmp_path):
    e, d, o = csv_trio(tmp_path, [], ["P1,X,1950,3"], [])
    with pytest.raises(DataError, match="column sex"):
        C.ingest_cohort(e, d, o)
    e, d, o = csv_trio(tmp_path, [], ["P1,F,1950,9"], [])
    with pytest.raises(DataError, match="imd_quintile"):
        C.ingest_cohort(e, d, o)


def test_outcome_sets_label_and_replacement(tmp_path):
    e, d, o = csv_trio(tmp_path, ["P1,2010-01-05,X1"], ["P1,F,1950,3"],
                       ["P1,2012-06-01"])
    h = C.ingest_cohort(e, d, o)[0]
    assert h.label is True and h.replacement_date == dt.date(2012, 6, 1)


def test_csv_round_trip(tmp_path):
    cfg = C.GeneratorConfig(n_patients=50, case_prevalence=0.2)
    histories = C.generate_synthetic_cohort(cfg, seed=3)
    C.write_cohort_csvs(histories, tmp_path)
    loaded = C.ingest_cohort(tmp_path / "events.csv", tmp_path / "demographics.csv",
                             tmp_path / "outcomes.csv")
    assert [h.patient_id for h in loaded] == [h.patient_id for h in histories]
    for a, b in zip(histories, loaded):
        assert a.visits == b.visits
        assert a.demographics == b.demographics
        assert a.replacement_date == b.replacement_date


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_generator_is_deterministic(tmp_path):
    cfg = C.GeneratorConfig(n_patients=200, case_prevalence=0.07)
    a = C.generate_synthetic_cohort(cfg, seed=42)
    b = C.generate_synthetic_cohort(cfg, seed=42)
    C.write_cohort_csvs(a, tmp_path / "a")
    C.write_cohort_csvs(b, tmp_path / "b")
    for name in ("events.csv", "demographics.csv", "outcomes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


def test_generator_prevalence_is_exact():
    cfg = C.GeneratorConfig(n_patients=2000, case_prevalence=0.5)
    histories = C.generate_synthetic_cohort(cfg, seed=1)
    n_cases = sum(h.label for h in histories)
    assert 980 <= n_cases <= 1020


def test_generator_mean_codes_per_visit():
    cfg = C.GeneratorConfig(n_patients=1000, case_prevalence=0.07,
                            mean_codes_per_visit=1.36)
    histories = C.generate_synthetic_cohort(cfg, seed=5)
    sizes = [len(codes) for h in histories for _, codes in h.visits]
    assert len(sizes) > 10_000
    assert 1.2 <= np.mean(sizes) <= 1.5


def test_generator_rejects_bad_prevalence():
    with pytest.raises(ConfigError):
        C.generate_synthetic_cohort(C.GeneratorConfig(case_prevalence=1.5), seed=0)
    with pytest.raises(ConfigError):
        C.generate_synthetic_cohort(C.GeneratorConfig(case_prevalence=0.0), seed=0)


def test_generator_demographics_within_bounds():
    cfg = C.GeneratorConfig(n_patients=300)
    for h in C.generate_synthetic_cohort(cfg, seed=9):
        d = h.demographics
        assert d.sex in ("F", "M")
        assert 1 <= d.imd_quintile <= 5
        age_at_entry = cfg.period_start.year - d.birth_year
        assert 40 <= age_at_entry <= 75


def test_generator_cases_carry_signal_codes():
    cfg = C.GeneratorConfig(n_patients=400, case_prevalence=0.25)
    histories = C.generate_synthetic_cohort(cfg, seed=11)

    def signal_rate(group):
        visits = [codes for h in group for _, codes in h.visits]
        return np.mean([bool(codes & set(C.SIGNAL_CODES)) for codes in visits])

    cases = [h for h in histories if h.label]
    controls = [h for h in histories if not h.label]
    assert signal_rate(cases) > 3 * signal_rate(controls)


# ---------------------------------------------------------------------------
# windowing and inclusion
# ---------------------------------------------------------------------------

def test_window_boundary_removes_on_or_after_cutoff():
    h = C.PatientHistory(
        patient_id="P1",
        visits=[(dt.date(2013, 5, 30), frozenset({"A"})),
                (dt.date(2013, 6, 1), frozenset({"B"})),
                (dt.date(2013, 7, 1), frozenset({"C"}))],
        demographics=DEMO, replacement_date=dt.date(2014, 6, 1))
    out = C.apply_time_window(h, horizon_months=12)
    assert [d for d, _ in out.visits] == [dt.date(2013, 5, 30)]
    assert out.label is True
    assert out.replacement_date == dt.date(2014, 6, 1)


def test_window_passes_controls_through():
    h = C.PatientHistory(patient_id="P1",
                         visits=[(dt.date(2010, 1, 1), frozenset({"A"}))],
                         demographics=DEMO)
    out = C.apply_time_window(h, 12)
    assert out.visits == h.visits and out.label is False


def test_window_can_empty_a_case():
    h = C.PatientHistory(patient_id="P1",
                         visits=[(dt.date(2014, 1, 1), frozenset({"A"}))],
                         demographics=DEMO, replacement_date=dt.date(2014, 6, 1))
    out = C.apply_time_window(h, 12)
    assert out.visits == [] and out.label is True


def test_window_clamps_month_end():
    # March 31 minus one month clamps to February 28
    assert C.shift_months(dt.date(2013, 3, 31), -1) == dt.date(2013, 2, 28)


def test_inclusion_boundary():
    def with_n_visits(n, pid):
        visits = [(dt.date(2010, 1, 1) + dt.timedelta(days=i), frozenset({"A"}))
                  for i in range(n)]
        return C.PatientHistory(patient_id=pid, visits=visits, demographics=DEMO)

    kept = C.apply_inclusion_criteria([with_n_visits(2, "P1"), with_n_visits(1, "P2")])
    assert [h.patient_id for h in kept] == ["P1"]
    assert C.apply_inclusion_criteria([]) == []


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def mk(pid, sex="F", by=1950, imd=3, replacement=None):
    return C.PatientHistory(
        patient_id=pid, visits=[(dt.date(2005, 1, 1), frozenset({"A"})),
                                (dt.date(2006, 1, 1), frozenset({"B"}))],
        demographics=C.Demographics(sex=sex, birth_year=by, imd_quintile=imd),
        replacement_date=replacement, label=replacement is not None)


REP = dt.date(2012, 6, 1)


def test_exact_match():
    pairs, unmatched = C.match_case_control([mk("C1", replacement=REP), mk("K1")])
    assert pairs == [C.MatchPair("C1", "K1", 0)]
    assert unmatched == []


def test_sex_is_a_hard_constraint():
    pairs, unmatched = C.match_case_control(
        [mk("C1", sex="F", replacement=REP), mk("K1", sex="M")])
    assert pairs == [] and unmatched == ["C1"]


def test_greedy_order_matches_enumeration_oracle():
    # cases aged 70 and 71 (processed in id order), controls aged 70 and 73:
    # greedy assigns (70, 70) then (71, 73)
    pool = [mk("C1", by=REP.year - 70, replacement=REP),
            mk("C2", by=REP.year - 71, replacement=REP),
            mk("K1", by=REP.year - 70), mk("K2", by=REP.year - 73)]
    pairs, unmatched = C.match_case_control(pool)
    assert pairs == [C.MatchPair("C1", "K1", 0), C.MatchPair("C2", "K2", 2)]

    # oracle: replay the documented greedy rule over explicit enumeration
    available = {"K1": 70, "K2": 73}
    expected = []
    for case_id, age in (("C1", 70), ("C2", 71)):
        best = min(available.items(), key=lambda kv: (abs(kv[1] - age), kv[0]))
        expected.append((case_id, best[0], abs(best[1] - age)))
        del available[best[0]]
    assert [(p.case_id, p.control_id, p.age_difference_years) for p in pairs] == expected


def test_ties_break_to_smaller_control_id():
    pool = [mk("C1", by=1950, replacement=REP),
            mk("K9", by=1949), mk("K2", by=1951)]
    pairs, _ = C.match_case_control(pool)
    assert pairs[0].control_id == "K2"   # both 1 year away


def test_controls_never_reused():
    pool = [mk("C1", replacement=REP), mk("C2", replacement=REP), mk("K1")]
    pairs, unmatched = C.match_case_control(pool)
    assert len(pairs) == 1 and unmatched == ["C2"]


def test_max_age_gap_enforced():
    pool = [mk("C1", by=1950, replacement=REP), mk("K1", by=1958)]
    pairs, unmatched = C.match_case_control(pool, max_age_gap=5)
    assert pairs == [] and unmatched == ["C1"]
    pairs, unmatched = C.match_case_control(pool, max_age_gap=8)
    assert len(pairs) == 1


def test_pairs_share_sex_and_imd_exactly():
    rng = np.random.default_rng(0)
    pool = []
    for i in range(60):
        sex = "F" if rng.random() < 0.5 else "M"
        pool.append(mk(f"C{i:03d}", sex=sex, by=int(rng.integers(1940, 1970)),
                       imd=int(rng.integers(1, 6)), replacement=REP))
    for i in range(240):
        sex = "F" if rng.random() < 0.5 else "M"
        pool.append(mk(f"K{i:03d}", sex=sex, by=int(rng.integers(1940, 1970)),
                       imd=int(rng.integers(1, 6))))
    pairs, _ = C.match_case_control(pool)
    by_id = {h.patient_id: h for h in pool}
    seen_controls = set()
    for p in pairs:
        case, control = by_id[p.case_id], by_id[p.control_id]
        assert case.demographics.sex == control.demographics.sex
        assert case.demographics.imd_quintile == control.demographics.imd_quintile
        assert p.age_difference_years == abs(case.demographics.birth_year
                                             - control.demographics.birth_year)
        assert p.age_difference_years <= 5
        assert p.control_id not in seen_controls
        seen_controls.add(p.control_id)


# ---------------------------------------------------------------------------
# split and folds
# ---------------------------------------------------------------------------

def synthetic_included(n=1000, prevalence=0.07, seed=42):
    cfg = C.GeneratorConfig(n_patients=n, case_prevalence=prevalence)
    histories = C.generate_synthetic_cohort(cfg, seed=seed)
    windowed = [C.apply_time_window(h, 12) for h in histories]
    return C.apply_inclusion_criteria(windowed)


def test_split_sizes_and_prevalence():
    included = synthetic_included(1000, 0.07)
    n_cases = sum(h.label for h in included)
    split = C.split_cohort(included, seed=7)
    n_test = len(split.test1) + len(split.test2)
    assert abs(n_test - round(0.1 * len(included))) <= 1
    assert abs(len(split.test1) - len(split.test2)) <= 1
    c1 = sum(h.label for h in split.test1)
    c2 = sum(h.label for h in split.test2)
    assert abs(c1 - c2) <= 1
    assert c1 + c2 == round(0.1 * n_cases)
    # matched training set is balanced
    train_cases = sum(h.label for h in split.matched_train)
    assert 2 * train_cases == len(split.matched_train)
    assert len(split.pairs) == train_cases


def test_split_partitions_are_disjoint():
    included = synthetic_included(600, 0.1, seed=8)
    split = C.split_cohort(included, seed=3)
    ids = [h.patient_id for part in (split.matched_train, split.test1, split.test2)
           for h in part]
    assert len(ids) == len(set(ids))
    assert set(ids) <= {h.patient_id for h in included}


def test_split_determinism():
    included = synthetic_included(500, 0.1, seed=2)
    a = C.split_cohort(included, seed=9)
    b = C.split_cohort(included, seed=9)
    assert [h.patient_id for h in a.matched_train] == \
        [h.patient_id for h in b.matched_train]
    assert [h.patient_id for h in a.test1] == [h.patient_id for h in b.test1]
    assert [h.patient_id for h in a.test2] == [h.patient_id for h in b.test2]
    assert a.fold_assignment == b.fold_assignment


def test_split_rejects_tiny_or_caseless_cohorts():
    included = synthetic_included(100, 0.1, seed=2)
    with pytest.raises(DataError, match="cohort too small"):
        C.split_cohort(included[:10], seed=0)
    controls_only = [h for h in included if not h.label]
    with pytest.raises(DataError, match="cohort too small"):
        C.split_cohort(controls_only, seed=0)


def test_windowing_safety_across_partitions():
    included = synthetic_included(800, 0.1, seed=4)
    split = C.split_cohort(included, seed=1)
    for part in (split.matched_train, split.test1, split.test2):
        for h in part:
            if h.replacement_date is None:
                continue
            cutoff = C.shift_months(h.replacement_date, -12)
            assert all(date < cutoff for date, _ in h.visits)


def test_folds_balanced_for_ten_pairs():
    pairs = [C.MatchPair(f"C{i}", f"K{i}", 0) for i in range(10)]
    assignment = C.make_cv_folds(pairs, k=5, seed=0)
    sizes = [sum(1 for v in assignment.values() if v == f) for f in range(5)]
    assert sizes == [4] * 5   # 2 pairs x 2 patients per fold


def test_case_and_control_share_fold():
    pairs = [C.MatchPair(f"C{i}", f"K{i}", 0) for i in range(7)]
    assignment = C.make_cv_folds(pairs, k=5, seed=3)
    for p in pairs:
        assert assignment[p.case_id] == assignment[p.control_id]


def test_fold_sizes_with_remainder():
    pairs = [C.MatchPair(f"C{i:02d}", f"K{i:02d}", 0) for i in range(11)]
    assignment = C.make_cv_folds(pairs, k=5, seed=1)
    pair_counts = sorted(
        (sum(1 for p in pairs if assignment[p.case_id] == f) for f in range(5)),
        reverse=True)
    assert pair_counts == [3, 2, 2, 2, 2]


def test_prediction_date_rules():
    case = mk("C1", replacement=dt.date(2012, 6, 1))
    assert C.prediction_date(case, 12) == dt.date(2011, 6, 1)
    control = mk("K1")
    assert C.prediction_date(control, 12) == control.visits[-1][0]
