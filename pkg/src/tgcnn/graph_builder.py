"""Map code sequences to node indices and build sparse temporal-graph 3-tensors.

A patient's visit sequence becomes a (V, V, K) coordinate-list tensor: each
pair of consecutive visits is one "transition" occupying one time slot, and
every (code in earlier visit, code in later visit) pair contributes one edge
carrying the elapsed time in months. Short sequences are front-padded so the
most recent transition always sits in the last slot.
"""

from __future__ import annotations

import datetime as dt
import warnings
from dataclasses import dataclass

import numpy as np

from .cohort import PatientHistory
from .errors import ConfigError, GraphBuildError

DAYS_PER_MONTH = 30.44

# Synthetic prescription nodes appended by extend_vocabulary_with_prescriptions:
# three medication groups, each split into acute and repeat prescription types.
PRESCRIPTION_CODES = (
    "RXOPIOIDACUTE", "RXOPIOIDREPEAT",
    "RXNONOPIOIDACUTE", "RXNONOPIOIDREPEAT",
    "RXNSAIDACUTE", "RXNSAIDREPEAT",
)


@dataclass
class CodeVocabulary:
    """Frequency-ranked bijection between code strings and node indices."""

    code_to_index: dict[str, int]
    index_to_code: list[str]
    coverage: float
    extended: bool = False

    @property
    def size(self) -> int:
        return len(self.index_to_code)

    def __contains__(self, code: str) -> bool:
        return code in self.code_to_index


@dataclass
class TemporalGraphTensor:
    """Sparse (V, V, K) tensor as parallel coordinate arrays sorted by (k, i, j)."""

    rows: np.ndarray        # source node index per entry
    cols: np.ndarray        # target node index per entry
    slots: np.ndarray       # time-slot index per entry
    times: np.ndarray       # elapsed months per entry
    n_nodes: int
    n_slots: int

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def entries(self) -> list[tuple[int, int, int, float]]:
        return [(int(i), int(j), int(k), float(t))
                for i, j, k, t in zip(self.rows, self.cols, self.slots, self.times)]

    def to_dense(self) -> np.ndarray:
        """Materialise the dense tensor. Debug/oracle use only; O(V^2 K) memory."""
        dense = np.zeros((self.n_nodes, self.n_nodes, self.n_slots))
        dense[self.rows, self.cols, self.slots] = self.times
        return dense

    def dump(self) -> str:
        """Text form: header ``V K n_entries`` then ``i j k t`` lines sorted by (k, i, j)."""
        lines = [f"{self.n_nodes} {self.n_slots} {self.nnz}"]
        for i, j, k, t in self.entries():
            lines.append(f"{i} {j} {k} {t!r}")
        return "\n".join(lines) + "\n"


def build_vocabulary(histories: list[PatientHistory], max_codes: int = 512) -> CodeVocabulary:
    """Rank codes by total occurrence count across all visits and keep the top ones.

    Ties break lexicographically. Reserved prescription node names are excluded
    from ranking (they only enter via extend_vocabulary_with_prescriptions).
    Returns the coverage fraction of kept occurrences over all occurrences.
    """
    if max_codes < 1:
        raise ConfigError(f"vocabulary size must be >= 1, got {max_codes}")
    counts: dict[str, int] = {}
    total = 0
    for history in histories:
        for _, codes in history.visits:
            for code in codes:
                if code in PRESCRIPTION_CODES:
                    continue
                counts[code] = counts.get(code, 0) + 1
                total += 1
    if len(counts) < max_codes:
        warnings.warn(f"only {len(counts)} distinct codes available for a "
                      f"vocabulary of {max_codes}; keeping all of them")
    ranked = sorted(counts, key=lambda c: (-counts[c], c))[:max_codes]
    kept = sum(counts[c] for c in ranked)
    coverage = kept / total if total else 0.0
    return CodeVocabulary(code_to_index={c: i for i, c in enumerate(ranked)},
                          index_to_code=list(ranked), coverage=coverage)


def extend_vocabulary_with_prescriptions(vocab: CodeVocabulary) -> CodeVocabulary:
    """Append the six synthetic prescription nodes (3 medication groups x acute/repeat)."""
    if vocab.extended:
        raise ConfigError("vocabulary already extended with prescription nodes")
    index_to_code = list(vocab.index_to_code) + list(PRESCRIPTION_CODES)
    return CodeVocabulary(code_to_index={c: i for i, c in enumerate(index_to_code)},
                          index_to_code=index_to_code,
                          coverage=vocab.coverage, extended=True)


def elapsed_months(date_a: dt.date, date_b: dt.date) -> float:
    """Real-valued months between two dates: day count / 30.44."""
    if date_b < date_a:
        raise ValueError(f"dates out of order: {date_a} > {date_b}")
    return (date_b - date_a).days / DAYS_PER_MONTH


def build_tensor(history: PatientHistory, vocab: CodeVocabulary, n_slots: int = 100,
                 limit: str = "transitions",
                 intra_visit_edges: bool = False) -> TemporalGraphTensor:
    """Build the sparse temporal-graph tensor for one patient.

    Visits are first restricted to in-vocabulary codes (visits left empty are
    dropped). Each consecutive retained visit pair forms one transition: the
    full cross-product of earlier-visit codes and later-visit codes, all
    sharing the transition's elapsed months. Only the most recent transitions
    are kept and they are front-padded into the last slots.

    ``limit`` selects what the slot budget counts: ``"transitions"`` keeps up
    to ``n_slots`` transitions, ``"visits"`` keeps the most recent ``n_slots``
    visits (hence at most ``n_slots - 1`` transitions). With
    ``intra_visit_edges`` enabled, code pairs co-occurring in a transition's
    target visit are added at the same slot with t = 0.
    """
    if limit not in ("transitions", "visits"):
        raise ConfigError(f"unknown slot limit mode {limit!r}")
    retained: list[tuple[dt.date, list[int]]] = []
    for date, codes in history.visits:
        idx = sorted(vocab.code_to_index[c] for c in codes if c in vocab.code_to_index)
        if idx:
            retained.append((date, idx))
    if len(retained) < 2:
        raise GraphBuildError(
            f"insufficient visits for patient {history.patient_id}: "
            f"{len(retained)} visit(s) with in-vocabulary codes")

    if limit == "visits" and len(retained) > n_slots:
        retained = retained[-n_slots:]
    transitions = list(zip(retained[:-1], retained[1:]))
    if len(transitions) > n_slots:
        transitions = transitions[-n_slots:]

    first_slot = n_slots - len(transitions)
    rows, cols, slots, times = [], [], [], []
    for offset, ((date_a, src), (date_b, dst)) in enumerate(transitions):
        k = first_slot + offset
        t = elapsed_months(date_a, date_b)
        for i in src:
            for j in dst:
                rows.append(i)
                cols.append(j)
                slots.append(k)
                times.append(t)
        if intra_visit_edges:
            for a in dst:
                for b in dst:
                    if a != b:
                        rows.append(a)
                        cols.append(b)
                        slots.append(k)
                        times.append(0.0)

    order = sorted(range(len(rows)), key=lambda e: (slots[e], rows[e], cols[e]))
    return TemporalGraphTensor(
        rows=np.array([rows[e] for e in order], dtype=np.int64),
        cols=np.array([cols[e] for e in order], dtype=np.int64),
        slots=np.array([slots[e] for e in order], dtype=np.int64),
        times=np.array([times[e] for e in order], dtype=np.float64),
        n_nodes=vocab.size, n_slots=n_slots)


def empty_tensor(vocab: CodeVocabulary, n_slots: int) -> TemporalGraphTensor:
    """Tensor with no entries (used for patients whose visits all fall out of vocabulary)."""
    z = np.zeros(0, dtype=np.int64)
    return TemporalGraphTensor(rows=z, cols=z.copy(), slots=z.copy(),
                               times=np.zeros(0), n_nodes=vocab.size, n_slots=n_slots)
