"""Cohort construction: ingestion, synthesis, windowing, matching, and splits.

Patient event data comes either from three CSV files (events, demographics,
outcomes) or from the synthetic generator. Downstream steps mirror a
case-control protocol: the outcome window is cut off one year before the
replacement, patients need at least two remaining visits, a random 10% of
patients is held out (split in half into Test 1 / Test 2), and the remaining
cases are matched 1:1 to controls on sex, deprivation quintile, and age.
"""

from __future__ import annotations

import calendar
import csv
import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError

SEXES = ("F", "M")

DAYS_PER_MONTH = 30.44

# Code tokens planted by the generator for case trajectories (hip pain / OA family).
SIGNAL_CODES = ("HIPPAIN1", "HIPOA1", "JOINTSTIFF1")

_GENERATOR_PRESCRIPTIONS = (
    "RXOPIOIDACUTE", "RXOPIOIDREPEAT",
    "RXNONOPIOIDACUTE", "RXNONOPIOIDREPEAT",
    "RXNSAIDACUTE", "RXNSAIDREPEAT",
)


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    date: dt.date
    code: str


@dataclass(frozen=True)
class Demographics:
    sex: str                 # "F" or "M"
    birth_year: int
    imd_quintile: int        # 1 = most deprived .. 5 = least deprived


@dataclass
class PatientHistory:
    """One patient's visit-grouped events plus demographics and outcome."""

    patient_id: str
    visits: list[tuple[dt.date, frozenset[str]]]   # sorted by date
    demographics: Demographics
    replacement_date: dt.date | None = None
    label: bool = False


@dataclass(frozen=True)
class MatchPair:
    case_id: str
    control_id: str
    age_difference_years: int


@dataclass
class CohortSplit:
    matched_train: list[PatientHistory]
    test1: list[PatientHistory]
    test2: list[PatientHistory]
    fold_assignment: dict[str, int]
    pairs: list[MatchPair] = field(default_factory=list)
    unmatched_case_ids: list[str] = field(default_factory=list)


def shift_months(date: dt.date, months: int) -> dt.date:
    """Calendar-aware month shift; the day of month is clamped to the target month."""
    total = date.year * 12 + (date.month - 1) + months
    year, month = divmod(total, 12)
    day = min(date.day, calendar.monthrange(year, month + 1)[1])
    return dt.date(year, month + 1, day)


def age_at(demographics: Demographics, on_date: dt.date) -> float:
    """Age in years on a date, from birth year (birth assumed at Jan 1)."""
    return (on_date - dt.date(demographics.birth_year, 1, 1)).days / 365.25


def prediction_date(history: PatientHistory, horizon_months: int = 12) -> dt.date:
    """The date a prediction is anchored at.

    Cases are predicted one horizon before the replacement; controls at their
    most recent retained visit.
    """
    if history.replacement_date is not None:
        return shift_months(history.replacement_date, -horizon_months)
    if not history.visits:
        raise DataError(f"patient {history.patient_id} has no visits and no outcome")
    return history.visits[-1][0]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_csv_rows(path, expected_header: list[str]):
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != expected_header:
            raise DataError(f"{path}: line 1: expected header "
                            f"{','.join(expected_header)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise DataError(f"{path}: line {lineno}: expected "
                                f"{len(expected_header)} columns, got {len(row)}")
            yield lineno, row


def _parse_date(path, lineno, column, text) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise DataError(f"{path}: line {lineno}: column {column}: "
                        f"invalid date {text!r} (expected YYYY-MM-DD)") from None


def ingest_cohort(events_path, demographics_path, outcomes_path) -> list[PatientHistory]:
    """Load patient histories from the three-CSV layout.

    Events on the same date for the same patient merge into one visit;
    duplicate (patient, date, code) rows are deduplicated silently. Events or
    outcomes for patients missing from the demographics file are rejected.
    """
    demographics: dict[str, Demographics] = {}
    for lineno, row in _read_csv_rows(demographics_path,
                                      ["patient_id", "sex", "birth_year", "imd_quintile"]):
        pid, sex, birth_year, imd = row
        if not pid:
            raise DataError(f"{demographics_path}: line {lineno}: column patient_id: empty")
        if pid in demographics:
            raise DataError(f"{demographics_path}: line {lineno}: duplicate patient {pid!r}")
        if sex not in SEXES:
            raise DataError(f"{demographics_path}: line {lineno}: column sex: "
                            f"expected F or M, got {sex!r}")
        try:
            year = int(birth_year)
        except ValueError:
            raise DataError(f"{demographics_path}: line {lineno}: column birth_year: "
                            f"not an integer: {birth_year!r}") from None
        try:
            quintile = int(imd)
        except ValueError:
            raise DataError(f"{demographics_path}: line {lineno}: column imd_quintile: "
                            f"not an integer: {imd!r}") from None
        if not 1 <= quintile <= 5:
            raise DataError(f"{demographics_path}: line {lineno}: column imd_quintile: "
                            f"must be 1..5, got {quintile}")
        demographics[pid] = Demographics(sex=sex, birth_year=year, imd_quintile=quintile)

    visits: dict[str, dict[dt.date, set[str]]] = {pid: {} for pid in demographics}
    for lineno, row in _read_csv_rows(events_path, ["patient_id", "date", "code"]):
        pid, date_text, code = row
        if pid not in demographics:
            raise DataError(f"{events_path}: line {lineno}: unknown patient {pid!r}")
        date = _parse_date(events_path, lineno, "date", date_text)
        if not code:
            raise DataError(f"{events_path}: line {lineno}: column code: empty")
        visits[pid].setdefault(date, set()).add(code)

    outcomes: dict[str, dt.date] = {}
    for lineno, row in _read_csv_rows(outcomes_path, ["patient_id", "replacement_date"]):
        pid, date_text = row
        if pid not in demographics:
            raise DataError(f"{outcomes_path}: line {lineno}: unknown patient {pid!r}")
        if pid in outcomes:
            raise DataError(f"{outcomes_path}: line {lineno}: duplicate outcome for {pid!r}")
        outcomes[pid] = _parse_date(outcomes_path, lineno, "replacement_date", date_text)

    histories = []
    for pid in sorted(demographics):
        ordered = [(date, frozenset(codes)) for date, codes in sorted(visits[pid].items())]
        replacement = outcomes.get(pid)
        histories.append(PatientHistory(patient_id=pid, visits=ordered,
                                        demographics=demographics[pid],
                                        replacement_date=replacement,
                                        label=replacement is not None))
    return histories


def write_cohort_csvs(histories: list[PatientHistory], out_dir) -> None:
    """Write events/demographics/outcomes CSVs in the ingestion schema."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "events.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("patient_id,date,code\n")
        for h in sorted(histories, key=lambda h: h.patient_id):
            for date, codes in h.visits:
                for code in sorted(codes):
                    fh.write(f"{h.patient_id},{date.isoformat()},{code}\n")
    with open(out_dir / "demographics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("patient_id,sex,birth_year,imd_quintile\n")
        for h in sorted(histories, key=lambda h: h.patient_id):
            d = h.demographics
            fh.write(f"{h.patient_id},{d.sex},{d.birth_year},{d.imd_quintile}\n")
    with open(out_dir / "outcomes.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("patient_id,replacement_date\n")
        for h in sorted(histories, key=lambda h: h.patient_id):
            if h.replacement_date is not None:
                fh.write(f"{h.patient_id},{h.replacement_date.isoformat()}\n")


# ---------------------------------------------------------------------------
# Synthetic cohort generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Knobs for the synthetic desk-scale cohort.

    Cases carry a planted sequence signal: hip-pain/OA codes appear with
    probability rising as the replacement date approaches, visits cluster more
    densely before the replacement, and inter-visit gaps shrink. Demographics
    are sampled independently of the outcome so they carry no signal.
    """

    n_patients: int = 1000
    case_prevalence: float = 0.07
    vocabulary_size: int = 60            # number of distinct background codes
    mean_visits: float = 12.0
    mean_codes_per_visit: float = 1.36
    period_start: dt.date = dt.date(1999, 4, 1)
    period_end: dt.date = dt.date(2014, 3, 31)
    min_age: int = 40
    max_age: int = 75
    case_visit_multiplier: float = 1.5   # elevated visit frequency for cases
    signal_window_months: float = 42.0   # how far before replacement the signal ramps up
    signal_strength: float = 0.9         # per-visit signal-code probability at the replacement
    control_signal_rate: float = 0.02    # background rate of hip-pain codes in controls
    include_prescriptions: bool = False
    prescription_rate: float = 0.15
    deceased_fraction: float = 0.0       # flag only: truncates events at a death date


def generate_synthetic_cohort(config: GeneratorConfig, seed: int) -> list[PatientHistory]:
    """Deterministically synthesise a cohort with a planted case signal.

    Case counts are allocated exactly (round(n * prevalence)), so the realised
    prevalence always sits within one percentage point of the configured value.
    """
    if not 0.0 < config.case_prevalence < 1.0:
        raise ConfigError(f"case_prevalence must be in (0, 1), "
                          f"got {config.case_prevalence}")
    if config.period_end <= config.period_start:
        raise ConfigError("period_end must be after period_start")
    rng = np.random.default_rng(seed)
    n = config.n_patients
    n_cases = int(round(n * config.case_prevalence))
    case_flags = np.zeros(n, dtype=bool)
    case_flags[rng.choice(n, size=n_cases, replace=False)] = True

    # Mild power-law over background codes so frequency ranking is meaningful.
    weights = 1.0 / np.arange(2, config.vocabulary_size + 2) ** 0.8
    weights /= weights.sum()
    period_days = (config.period_end - config.period_start).days

    histories = []
    for i in range(n):
        pid = f"P{i:06d}"
        demo = Demographics(
            sex=SEXES[int(rng.integers(2))],
            birth_year=int(rng.integers(config.period_start.year - config.max_age,
                                        config.period_start.year - config.min_age + 1)),
            imd_quintile=int(rng.integers(1, 6)))
        replacement = None
        if case_flags[i]:
            # leave at least 30 months of pre-replacement history inside the period
            lo = 30 * int(DAYS_PER_MONTH)
            replacement = config.period_start + dt.timedelta(
                days=int(rng.integers(lo, period_days + 1)))
            span_days = (replacement - config.period_start).days
            n_base = max(2, int(rng.poisson(config.mean_visits * config.case_visit_multiplier)))
            dates = [config.period_start + dt.timedelta(days=int(d))
                     for d in rng.integers(0, span_days, size=n_base)]
            # extra visits clustered in the final years before the replacement
            n_near = int(rng.poisson(config.mean_visits * 0.5))
            near_span = min(span_days, int(36 * DAYS_PER_MONTH))
            dates += [replacement - dt.timedelta(days=int(d) + 1)
                      for d in rng.integers(0, near_span, size=n_near)]
        else:
            n_base = max(2, int(rng.poisson(config.mean_visits)))
            dates = [config.period_start + dt.timedelta(days=int(d))
                     for d in rng.integers(0, period_days + 1, size=n_base)]

        if config.deceased_fraction > 0 and rng.random() < config.deceased_fraction:
            death = config.period_start + dt.timedelta(
                days=int(rng.integers(0, period_days + 1)))
            dates = [d for d in dates if d <= death] or dates[:1]

        visit_dates = sorted(set(dates))
        visits = []
        for date in visit_dates:
            n_codes = 1 + int(rng.poisson(max(0.0, config.mean_codes_per_visit - 1.0)))
            codes = {f"C{int(c):04d}" for c in
                     rng.choice(config.vocabulary_size, size=n_codes, p=weights)}
            if replacement is not None:
                months_before = (replacement - date).days / DAYS_PER_MONTH
                ramp = max(0.0, 1.0 - months_before / config.signal_window_months)
                p_signal = config.signal_strength * ramp
            else:
                p_signal = config.control_signal_rate
            if rng.random() < p_signal:
                codes.add(SIGNAL_CODES[int(rng.integers(len(SIGNAL_CODES)))])
            if config.include_prescriptions and rng.random() < config.prescription_rate:
                codes.add(_GENERATOR_PRESCRIPTIONS[
                    int(rng.integers(len(_GENERATOR_PRESCRIPTIONS)))])
            visits.append((date, frozenset(codes)))

        histories.append(PatientHistory(patient_id=pid, visits=visits,
                                        demographics=demo,
                                        replacement_date=replacement,
                                        label=replacement is not None))
    return histories



# ---------------------------------------------------------------------------
# Windowing, inclusion, matching, splitting
# ---------------------------------------------------------------------------

def apply_time_window(history: PatientHistory, horizon_months: int = 12) -> PatientHistory:
    """Drop case visits on or after (replacement - horizon); controls pass through.

    The replacement date is retained for age-at-replacement reporting.
    """
    if horizon_months <= 0:
        raise ConfigError(f"horizon_months must be positive, got {horizon_months}")
    if history.replacement_date is None:
        return replace(history, visits=list(history.visits), label=False)
    cutoff = shift_months(history.replacement_date, -horizon_months)
    kept = [(date, codes) for date, codes in history.visits if date < cutoff]
    return replace(history, visits=kept, label=True)


def apply_inclusion_criteria(histories: list[PatientHistory]) -> list[PatientHistory]:
    """Keep patients with at least two remaining visits; order preserved."""
    return [h for h in histories if len(h.visits) >= 2]


def match_case_control(pool: list[PatientHistory],
                       max_age_gap: int = 5) -> tuple[list[MatchPair], list[str]]:
    """Greedy 1:1 matching of cases to controls on exact sex/IMD and nearest age.

    Cases are processed in ascending patient_id order. Ages are evaluated at
    the case's replacement date for both members, so with year-resolution
    birth dates the age difference equals the birth-year difference. Ties on
    age difference break toward the smaller control patient_id; controls are
    never reused. Cases with no eligible control within ``max_age_gap`` years
    are reported unmatched.
    """
    cases = sorted((h for h in pool if h.label), key=lambda h: h.patient_id)
    controls = [h for h in pool if not h.label]

    # stratum -> birth_year -> ascending list of unused control ids
    strata: dict[tuple[str, int], dict[int, list[str]]] = {}
    for h in controls:
        d = h.demographics
        bucket = strata.setdefault((d.sex, d.imd_quintile), {}).setdefault(d.birth_year, [])
        bucket.append(h.patient_id)
    for years in strata.values():
        for bucket in years.values():
            bucket.sort(reverse=True)   # pop() takes the smallest id

    pairs: list[MatchPair] = []
    unmatched: list[str] = []
    for case in cases:
        if case.replacement_date is None:
            raise DataError(f"case {case.patient_id} has no replacement date")
        d = case.demographics
        years = strata.get((d.sex, d.imd_quintile), {})
        chosen = None
        for gap in range(max_age_gap + 1):
            candidates = []
            for year in ({d.birth_year} if gap == 0 else
                         {d.birth_year - gap, d.birth_year + gap}):
                bucket = years.get(year)
                if bucket:
                    candidates.append((bucket[-1], year))
            if candidates:
                control_id, year = min(candidates)
                years[year].pop()
                chosen = MatchPair(case_id=case.patient_id, control_id=control_id,
                                   age_difference_years=gap)
                break
        if chosen is None:
            unmatched.append(case.patient_id)
        else:
            pairs.append(chosen)
    return pairs, unmatched


def split_cohort(histories: list[PatientHistory], seed: int,
                 test_fraction: float = 0.10, max_age_gap: int = 5,
                 n_folds: int = 5) -> CohortSplit:
    """Hold out a stratified test sample, halve it, and match the remainder.

    A ``test_fraction`` sample preserving outcome prevalence is drawn, split
    randomly in half into Test 1 / Test 2 (each preserving prevalence to
    within one case), and the remaining patients are fed to case-control
    matching to form the balanced training set. Fold indices are assigned at
    the pair level. Deterministic given the seed.
    """
    cases = sorted((h for h in histories if h.label), key=lambda h: h.patient_id)
    controls = sorted((h for h in histories if not h.label), key=lambda h: h.patient_id)
    if len(histories) < 20 or not cases:
        raise DataError(f"cohort too small: {len(histories)} patients, "
                        f"{len(cases)} cases")
    rng = np.random.default_rng(seed)

    def sample_split(group: list[PatientHistory], n_test: int):
        order = rng.permutation(len(group))
        test_idx = order[:n_test]
        test = [group[i] for i in test_idx]
        rest = [group[i] for i in sorted(order[n_test:])]
        return test, rest

    n_test_cases = int(round(test_fraction * len(cases)))
    n_test_controls = int(round(test_fraction * len(controls)))
    test_cases, rest_cases = sample_split(cases, n_test_cases)
    test_controls, rest_controls = sample_split(controls, n_test_controls)

    half_cases = (len(test_cases) + 1) // 2
    half_controls = len(test_controls) // 2
    test1 = test_cases[:half_cases] + test_controls[:half_controls]
    test2 = test_cases[half_cases:] + test_controls[half_controls:]
    test1.sort(key=lambda h: h.patient_id)
    test2.sort(key=lambda h: h.patient_id)

    pool = sorted(rest_cases + rest_controls, key=lambda h: h.patient_id)
    pairs, unmatched = match_case_control(pool, max_age_gap=max_age_gap)
    matched_ids = {p.case_id for p in pairs} | {p.control_id for p in pairs}
    matched_train = [h for h in pool if h.patient_id in matched_ids]

    fold_assignment = make_cv_folds(pairs, k=n_folds, seed=seed + 1)
    return CohortSplit(matched_train=matched_train, test1=test1, test2=test2,
                       fold_assignment=fold_assignment, pairs=pairs,
                       unmatched_case_ids=unmatched)


def make_cv_folds(pairs: list[MatchPair], k: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign folds at the pair level so each fold stays case/control balanced.

    Pairs are shuffled then dealt round-robin, so fold sizes differ by at most
    one pair and a case always shares its fold with its matched control.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    assignment: dict[str, int] = {}
    for rank, idx in enumerate(order):
        pair = pairs[int(idx)]
        fold = rank % k
        assignment[pair.case_id] = fold
        assignment[pair.control_id] = fold
    return assignment
