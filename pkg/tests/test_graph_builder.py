"""Vocabulary construction and sparse temporal-graph tensor building."""

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgcnn.cohort import Demographics, PatientHistory
from tgcnn.errors import ConfigError, GraphBuildError
from tgcnn.graph_builder import (PRESCRIPTION_CODES, build_tensor, build_vocabulary,
                                 elapsed_months, empty_tensor,
                                 extend_vocabulary_with_prescriptions)

DEMO = Demographics(sex="F", birth_year=1950, imd_quintile=3)


def patient(visits, pid="P1"):
    return PatientHistory(patient_id=pid, visits=[(d, frozenset(c)) for d, c in visits],
                          demographics=DEMO)


def history_with_counts(counts):
    """One patient whose visits yield exactly the given code counts."""
    visits = []
    day = dt.date(2000, 1, 1)
    for code, n in counts.items():
        for _ in range(n):
            visits.append((day, {code}))
            day += dt.timedelta(days=1)
    return [patient(sorted(visits))]


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def test_vocabulary_counts_and_coverage():
    vocab = build_vocabulary(history_with_counts({"A": 5, "B": 3, "C": 1}),
                             max_codes=2)
    assert vocab.code_to_index == {"A": 0, "B": 1}
    assert vocab.coverage == pytest.approx(8 / 9)


def test_vocabulary_lexicographic_tie_break():
    vocab = build_vocabulary(history_with_counts({"B": 2, "A": 2}), max_codes=1)
    assert vocab.code_to_index == {"A": 0}


def test_vocabulary_fewer_codes_than_requested_warns():
    with pytest.warns(UserWarning, match="keeping all"):
        vocab = build_vocabulary(history_with_counts({"A": 1, "B": 1}), max_codes=10)
    assert vocab.size == 2


def test_vocabulary_reports_headline_coverage():
    # corpus engineered so the kept 512 codes cover 99.71% of all occurrences
    counts = {f"K{i:03d}": 19 for i in range(512)}       # 9728 kept occurrences
    kept = 512 * 19
    dropped = round(kept / 0.9971) - kept                # 29 dropped occurrences
    counts.update({f"Z{i:03d}": 1 for i in range(dropped)})
    vocab = build_vocabulary(history_with_counts(counts), max_codes=512)
    assert vocab.size == 512
    assert vocab.coverage == pytest.approx(0.9971, abs=5e-5)


def test_vocabulary_is_bijective_and_frequency_ranked():
    vocab = build_vocabulary(history_with_counts({"A": 7, "B": 9, "C": 3}),
                             max_codes=3)
    assert vocab.index_to_code == ["B", "A", "C"]
    for code, idx in vocab.code_to_index.items():
        assert vocab.index_to_code[idx] == code


def test_extend_with_prescriptions_adds_exactly_six():
    vocab = build_vocabulary(history_with_counts({f"C{i}": 1 for i in range(10)}),
                             max_codes=10)
    extended = extend_vocabulary_with_prescriptions(vocab)
    assert extended.size == 16
    assert vocab.size == 10   # original untouched
    for code in PRESCRIPTION_CODES:
        assert code in extended.code_to_index
    assert len(PRESCRIPTION_CODES) == 6


def test_extend_headline_sizes():
    counts = {f"K{i:03d}": 2 for i in range(512)}
    vocab = build_vocabulary(history_with_counts(counts), max_codes=512)
    extended = extend_vocabulary_with_prescriptions(vocab)
    assert (vocab.size, extended.size) == (512, 518)   # + age, sex, IMD = 521 predictors


def test_extend_twice_raises():
    vocab = build_vocabulary(history_with_counts({"A": 1}), max_codes=1)
    extended = extend_vocabulary_with_prescriptions(vocab)
    with pytest.raises(ConfigError, match="already extended"):
        extend_vocabulary_with_prescriptions(extended)


# ---------------------------------------------------------------------------
# elapsed months
# ---------------------------------------------------------------------------

def test_elapsed_months_same_date_is_zero():
    d = dt.date(2011, 3, 4)
    assert elapsed_months(d, d) == 0.0


def test_elapsed_months_sixty_days():
    a, b = dt.date(2020, 1, 1), dt.date(2020, 3, 1)
    assert (b - a).days == 60
    assert elapsed_months(a, b) == pytest.approx(60 / 30.44)


def test_elapsed_months_one_year():
    a = dt.date(2001, 5, 10)
    b = a + dt.timedelta(days=365)
    assert elapsed_months(a, b) == pytest.approx(365 / 30.44)
    assert elapsed_months(a, b) == pytest.approx(11.9908, abs=1e-3)


def test_elapsed_months_rejects_reversed_dates():
    with pytest.raises(ValueError):
        elapsed_months(dt.date(2020, 1, 2), dt.date(2020, 1, 1))


# ---------------------------------------------------------------------------
# tensor building
# ---------------------------------------------------------------------------

def small_vocab(n=6):
    counts = {f"C{i}": n - i for i in range(n)}
    return build_vocabulary(history_with_counts(counts), max_codes=n)


def test_single_transition_lands_in_last_slot():
    vocab = small_vocab()
    d1, d2 = dt.date(2005, 1, 1), dt.date(2005, 3, 1)
    tensor = build_tensor(patient([(d1, {"C0"}), (d2, {"C1"})]), vocab, n_slots=100)
    assert tensor.nnz == 1
    assert tensor.entries() == [(0, 1, 99, pytest.approx(elapsed_months(d1, d2)))]


def test_multi_code_visit_forms_cross_product():
    vocab = small_vocab()
    d1, d2 = dt.date(2005, 1, 1), dt.date(2005, 2, 1)
    tensor = build_tensor(patient([(d1, {"C0", "C1"}), (d2, {"C2"})]), vocab,
                          n_slots=10)
    entries = tensor.entries()
    assert len(entries) == 2
    assert {(i, j) for i, j, _, _ in entries} == {(0, 2), (1, 2)}
    assert len({k for _, _, k, _ in entries}) == 1
    assert len({t for _, _, _, t in entries}) == 1


def test_many_visits_keep_most_recent_transitions():
    vocab = small_vocab()
    start = dt.date(2000, 1, 1)
    visits = [(start + dt.timedelta(days=7 * i), {"C0"}) for i in range(150)]
    visits[-1] = (visits[-1][0], {"C1"})
    tensor = build_tensor(patient(visits), vocab, n_slots=100)
    assert tensor.nnz == 100                      # 149 transitions, 100 kept
    assert set(tensor.slots) == set(range(100))   # all slots occupied
    # most recent transition (C0 -> C1) sits in the last slot
    last = [e for e in tensor.entries() if e[2] == 99]
    assert last == [(0, 1, 99, pytest.approx(7 / 30.44))]


def test_visit_limit_mode_caps_visits_not_transitions():
    vocab = small_vocab()
    start = dt.date(2000, 1, 1)
    visits = [(start + dt.timedelta(days=i), {"C0"}) for i in range(150)]
    tensor = build_tensor(patient(visits), vocab, n_slots=100, limit="visits")
    assert tensor.nnz == 99   # 100 most recent visits -> 99 transitions
    assert set(tensor.slots) == set(range(1, 100))


def test_front_padding_occupies_trailing_slots():
    vocab = small_vocab()
    start = dt.date(2000, 1, 1)
    visits = [(start + dt.timedelta(days=30 * i), {"C0"}) for i in range(5)]
    tensor = build_tensor(patient(visits), vocab, n_slots=12)
    assert sorted(set(tensor.slots)) == [8, 9, 10, 11]   # 4 transitions at the end


def test_same_day_visits_yield_zero_elapsed():
    vocab = small_vocab()
    d = dt.date(2005, 1, 1)
    # same-day events merge into one visit upstream; adjacent-day visits with
    # dates equal produce t=0 only through distinct same-date visit rows
    h = patient([(d, {"C0"}), (d, {"C1"})])
    tensor = build_tensor(h, vocab, n_slots=4)
    assert tensor.times.tolist() == [0.0]


def test_out_of_vocabulary_codes_drop_visits_first():
    vocab = small_vocab(2)   # only C0, C1
    d = dt.date(2005, 1, 1)
    visits = [(d, {"C0"}), (d + dt.timedelta(days=10), {"C5"}),
              (d + dt.timedelta(days=40), {"C1"})]
    tensor = build_tensor(patient(visits), vocab, n_slots=8)
    # middle visit vanishes, so the surviving transition spans 40 days
    assert tensor.entries() == [(0, 1, 7, pytest.approx(40 / 30.44))]


def test_insufficient_visits_raises():
    vocab = small_vocab(2)
    d = dt.date(2005, 1, 1)
    with pytest.raises(GraphBuildError, match="insufficient visits"):
        build_tensor(patient([(d, {"C0"}), (d + dt.timedelta(days=3), {"C5"})]),
                     vocab, n_slots=8)


def test_round_trip_decoding_reproduces_transitions():
    vocab = small_vocab()
    rng = np.random.default_rng(4)
    day = dt.date(2003, 1, 1)
    visits = []
    for _ in range(7):
        day += dt.timedelta(days=int(rng.integers(0, 90)))
        codes = {f"C{i}" for i in rng.choice(6, size=int(rng.integers(1, 4)),
                                             replace=False)}
        visits.append((day, codes))
    h = patient(visits)
    tensor = build_tensor(h, vocab, n_slots=50)

    # decode entries back to (source codes, target codes, elapsed) per slot
    by_slot = {}
    for i, j, k, t in tensor.entries():
        src, dst, _ = by_slot.setdefault(k, (set(), set(), t))
        src.add(vocab.index_to_code[i])
        dst.add(vocab.index_to_code[j])
        assert by_slot[k][2] == t
    decoded = [by_slot[k] for k in sorted(by_slot)]
    expected = [(set(a_codes), set(b_codes),
                 pytest.approx(elapsed_months(a_date, b_date)))
                for (a_date, a_codes), (b_date, b_codes)
                in zip(visits[:-1], visits[1:])]
    assert [(s, d) for s, d, _ in decoded] == [(s, d) for s, d, _ in expected]
    for (_, _, got), (_, _, want) in zip(decoded, expected):
        assert got == want


@settings(max_examples=40, deadline=None)
@given(sizes=st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)),
                      min_size=1, max_size=6))
def test_entry_count_is_product_of_visit_sizes(sizes):
    vocab = small_vocab(6)
    day = dt.date(2001, 1, 1)
    visits = []
    code_sets = []
    for a, b in sizes:
        code_sets.append({f"C{i}" for i in range(a)})
        code_sets.append({f"C{i}" for i in range(b)})
    for codes in code_sets:
        visits.append((day, codes))
        day += dt.timedelta(days=13)
    tensor = build_tensor(patient(visits), vocab, n_slots=64)
    expected = sum(len(a) * len(b) for a, b in zip(code_sets[:-1], code_sets[1:]))
    assert tensor.nnz == expected
    # front padding: occupied slots are exactly the trailing ones
    n_trans = len(code_sets) - 1
    assert sorted(set(tensor.slots)) == list(range(64 - n_trans, 64))


def test_entries_sorted_with_no_duplicates():
    vocab = small_vocab()
    d = dt.date(2002, 2, 2)
    visits = [(d, {"C2", "C0", "C1"}), (d + dt.timedelta(days=5), {"C3", "C1"})]
    tensor = build_tensor(patient(visits), vocab, n_slots=4)
    keys = list(zip(tensor.slots, tensor.rows, tensor.cols))
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)


def test_dump_format():
    vocab = small_vocab(2)
    d = dt.date(2005, 1, 1)
    tensor = build_tensor(patient([(d, {"C0"}), (d + dt.timedelta(days=30), {"C1"})]),
                          vocab, n_slots=3)
    lines = tensor.dump().splitlines()
    assert lines[0] == "2 3 1"
    i, j, k, t = lines[1].split()
    assert (i, j, k) == ("0", "1", "2")
    assert float(t) == pytest.approx(30 / 30.44)


def test_empty_tensor_shape():
    vocab = small_vocab(3)
    tensor = empty_tensor(vocab, 9)
    assert tensor.nnz == 0 and tensor.n_nodes == 3 and tensor.n_slots == 9
