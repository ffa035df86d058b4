"""Frequency-class partitioning of the vocabulary.

Tokens are sorted by decreasing training frequency and cut into
contiguous classes. A partition is scored by the sum of two normalized
entropies: the uniformity of the per-class mass distribution plus the
mean uniformity of the within-class frequency distributions. ``mefmax``
greedily searches over candidate class counts, assigning each class an
equal share of frequency mass, and keeps the best-scoring count. Two
ablation partitioners fix the class count and split either by token
count or by frequency mass.

Conventions shared by every function here:
  * natural log (the efficiency ratio is base-invariant)
  * a singleton distribution has efficiency 1.0
  * zero counts are floored to 1 before normalizing, so every token
    belongs to a class and remains generable
  * frequency-sort ties break by ascending token id
  * the cumulative sweep compares with a 1e-12 slack so integer-count
    tables behave as in exact arithmetic
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import PARTITION_FORMAT_VERSION, DataError

SWEEP_EPS = 1e-12
TIE_EPS = 1e-12


def efficiency(masses) -> float:
    """Normalized entropy of a non-negative mass vector, in [0, 1].

    Shannon entropy of the normalized distribution divided by ``log n``
    where ``n`` is the number of elements (zeros included); ``0 log 0``
    counts as 0. A single element is perfectly uniform by convention.
    """
    m = np.asarray(masses, dtype=np.float64).ravel()
    if m.size == 0:
        raise ValueError("efficiency of an empty mass vector is undefined")
    if np.any(m < 0):
        raise ValueError("masses must be non-negative")
    total = m.sum()
    if total <= 0:
        raise ValueError("at least one mass must be positive")
    if m.size == 1:
        return 1.0
    p = m / total
    nz = p[p > 0]
    entropy = -float(np.dot(nz, np.log(nz)))
    return entropy / float(np.log(m.size))


@dataclass(frozen=True)
class PartitionScore:
    """Both uniformity terms and their sum; each term lies in [0, 1]."""

    class_efficiency: float
    mean_within_efficiency: float

    @property
    def total(self) -> float:
        return self.class_efficiency + self.mean_within_efficiency


@dataclass
class ClassPartition:
    """Contiguous classes over the frequency-sorted vocabulary.

    ``boundaries`` are end indices (exclusive) into the sorted order, the
    last always equal to the vocabulary size. ``sorted_order`` maps rank
    to token id; ``class_of`` and ``local_index`` map token id to its
    class and its position within the class.
    """

    boundaries: np.ndarray
    sorted_order: np.ndarray
    class_mass: np.ndarray
    class_of: np.ndarray
    local_index: np.ndarray
    score: PartitionScore

    @property
    def num_classes(self) -> int:
        return int(self.boundaries.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.sorted_order.shape[0])

    @property
    def rank_of(self) -> np.ndarray:
        inv = np.empty_like(self.sorted_order)
        inv[self.sorted_order] = np.arange(self.sorted_order.shape[0])
        return inv

    def class_slice(self, c: int) -> slice:
        start = 0 if c == 0 else int(self.boundaries[c - 1])
        return slice(start, int(self.boundaries[c]))

    def class_size(self, c: int) -> int:
        s = self.class_slice(c)
        return s.stop - s.start

    def class_token_ids(self, c: int) -> np.ndarray:
        return self.sorted_order[self.class_slice(c)]

    def to_json(self) -> str:
        payload = {
            "format_version": PARTITION_FORMAT_VERSION,
            "sorted_order": [int(i) for i in self.sorted_order],
            "boundaries": [int(b) for b in self.boundaries],
            "class_mass": [float(m) for m in self.class_mass],
            "score": {
                "class_efficiency": self.score.class_efficiency,
                "mean_within_efficiency": self.score.mean_within_efficiency,
                "total": self.score.total,
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClassPartition":
        payload = json.loads(text)
        version = payload.get("format_version")
        if version != PARTITION_FORMAT_VERSION:
            raise DataError(
                f"partition format version mismatch: file has {version}, "
                f"expected {PARTITION_FORMAT_VERSION}"
            )
        order = np.array(payload["sorted_order"], dtype=np.int64)
        boundaries = np.array(payload["boundaries"], dtype=np.int64)
        class_mass = np.array(payload["class_mass"], dtype=np.float64)
        class_of, local_index = _membership(order, boundaries)
        score = PartitionScore(
            payload["score"]["class_efficiency"],
            payload["score"]["mean_within_efficiency"],
        )
        return cls(boundaries, order, class_mass, class_of, local_index, score)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassPartition":
        p = Path(path)
        if not p.exists():
            raise DataError(f"partition file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Internals shared by the partition builders
# ---------------------------------------------------------------------------


def _as_counts(freq) -> np.ndarray:
    counts = np.asarray(getattr(freq, "counts", freq), dtype=np.float64).ravel()
    if counts.size == 0:
        raise ValueError("empty frequency table")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if counts.sum() <= 0:
        raise ValueError("frequency table total must be positive")
    return counts


def relative_masses(counts: np.ndarray) -> np.ndarray:
    """Normalize counts to masses; zero counts are treated as 1 so every
    token keeps a class and stays generable."""
    floored = np.where(counts > 0, counts, 1.0)
    return floored / floored.sum()


def sort_by_frequency(counts: np.ndarray) -> np.ndarray:
    """Permutation rank -> token id: decreasing count, ties by id."""
    ids = np.arange(counts.shape[0])
    return np.lexsort((ids, -counts))


def max_class_count(freq) -> int:
    """Largest candidate class count: floor of 1 / max relative mass."""
    counts = _as_counts(freq)
    masses = relative_masses(counts)
    return max(1, int(np.floor(1.0 / masses.max() + SWEEP_EPS)))


def sweep_boundaries(sorted_masses: np.ndarray, k: int) -> np.ndarray:
    """Cut the sorted masses at cumulative targets 1/k, 2/k, ..., 1.

    A boundary lands on the first index whose cumulative mass reaches the
    target (with the documented 1e-12 slack); the final boundary is
    forced to the vocabulary size so every token is housed even when
    rounding makes a late target unreachable.
    """
    n = sorted_masses.shape[0]
    cum = np.cumsum(sorted_masses)
    targets = np.arange(1, k + 1, dtype=np.float64) / k
    idx = np.searchsorted(cum, targets - SWEEP_EPS, side="left") + 1
    idx = np.minimum(idx, n)
    idx[-1] = n
    boundaries = np.unique(idx)
    return boundaries.astype(np.int64)


def _membership(order: np.ndarray, boundaries: np.ndarray):
    n = order.shape[0]
    sizes = np.diff(np.concatenate(([0], boundaries)))
    class_by_rank = np.repeat(np.arange(boundaries.shape[0]), sizes)
    starts = np.concatenate(([0], boundaries[:-1]))
    local_by_rank = np.arange(n) - starts[class_by_rank]
    class_of = np.empty(n, dtype=np.int64)
    local_index = np.empty(n, dtype=np.int64)
    class_of[order] = class_by_rank
    local_index[order] = local_by_rank
    return class_of, local_index


def _validate_boundaries(boundaries: np.ndarray, n: int) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.int64).ravel()
    if b.size == 0:
        raise ValueError("at least one boundary is required")
    if b[-1] != n:
        raise ValueError(f"last boundary must equal the vocabulary size {n}")
    if np.any(np.diff(b) <= 0) or b[0] <= 0:
        raise ValueError("boundaries must be strictly increasing; empty classes are not allowed")
    return b


def score_partition(freq, boundaries) -> PartitionScore:
    """Score a candidate partition: class-mass efficiency plus the mean
    within-class efficiency, on the frequency-sorted (zero-floored)
    masses."""
    counts = _as_counts(freq)
    b = _validate_boundaries(boundaries, counts.shape[0])
    order = sort_by_frequency(counts)
    masses = relative_masses(counts)[order]
    class_masses = np.add.reduceat(masses, np.concatenate(([0], b[:-1])))
    within = [
        efficiency(masses[(0 if i == 0 else b[i - 1]) : b[i]]) for i in range(b.shape[0])
    ]
    return PartitionScore(efficiency(class_masses), float(np.mean(within)))


def build_partition(freq, boundaries) -> ClassPartition:
    """Assemble a ClassPartition (with score) from explicit boundaries."""
    counts = _as_counts(freq)
    b = _validate_boundaries(boundaries, counts.shape[0])
    order = sort_by_frequency(counts)
    masses = relative_masses(counts)[order]
    class_mass = np.add.reduceat(masses, np.concatenate(([0], b[:-1])))
    class_of, local_index = _membership(order, b)
    return ClassPartition(b, order, class_mass, class_of, local_index, score_partition(counts, b))


# ---------------------------------------------------------------------------
# Partitioners
# ---------------------------------------------------------------------------


def mefmax(freq) -> ClassPartition:
    """Greedy search for the class count with maximal summed efficiency.

    For every candidate count K from 1 to floor(1 / max relative mass),
    cut the sorted masses at equal cumulative targets and score the
    result; the best-scoring candidate wins, with ties (within 1e-12)
    going to the smallest K.
    """
    counts = _as_counts(freq)
    order = sort_by_frequency(counts)
    masses = relative_masses(counts)[order]
    best_boundaries = None
    best_score = -np.inf
    for k in range(1, max_class_count(counts) + 1):
        boundaries = sweep_boundaries(masses, k)
        score = score_partition(counts, boundaries).total
        if score > best_score + TIE_EPS:
            best_score = score
            best_boundaries = boundaries
    return build_partition(counts, best_boundaries)


def partition_fixed_eq_token(freq, k: int) -> ClassPartition:
    """Ablation: K contiguous classes of (nearly) equal token count.

    When K does not divide the vocabulary size, the earlier classes take
    the extra token each.
    """
    counts = _as_counts(freq)
    n = counts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"class count {k} out of range 1..{n}")
    base, extra = divmod(n, k)
    sizes = np.array([base + 1] * extra + [base] * (k - extra), dtype=np.int64)
    return build_partition(counts, np.cumsum(sizes))


def partition_fixed_eq_freq(freq, k: int) -> ClassPartition:
    """Ablation: the equal-mass cumulative sweep at a fixed class count."""
    counts = _as_counts(freq)
    limit = max_class_count(counts)
    if not 1 <= k <= limit:
        raise ValueError(f"class count {k} out of range 1..{limit}")
    order = sort_by_frequency(counts)
    masses = relative_masses(counts)[order]
    return build_partition(counts, sweep_boundaries(masses, k))


def make_partition(freq, strategy: str, k: int | None = None) -> ClassPartition:
    """Dispatch on the partition strategy name used in experiment configs."""
    if strategy == "mefmax":
        return mefmax(freq)
    if strategy == "fixed_eq_token":
        if k is None:
            raise ValueError("fixed_eq_token requires a class count")
        return partition_fixed_eq_token(freq, k)
    if strategy == "fixed_eq_freq":
        if k is None:
            raise ValueError("fixed_eq_freq requires a class count")
        return partition_fixed_eq_freq(freq, k)
    raise ValueError(f"unknown partition strategy: {strategy!r}")


def single_class_partition(vocab_size: int) -> ClassPartition:
    """Trivial one-class partition (used by plain-softmax heads)."""
    return build_partition(np.ones(vocab_size), np.array([vocab_size]))
