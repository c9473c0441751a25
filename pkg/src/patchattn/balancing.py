"""Class-imbalance strategies: loss weights, diagnosis-guided weights and samplers."""

from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

DIAGNOSIS_METHODS = ("expert_consensus", "serial_imaging", "confocal_microscopy", "histopathology")
DEFAULT_MULTIPLIERS = {
    "expert_consensus": 1.0,
    "serial_imaging": 1.2,
    "confocal_microscopy": 1.4,
    "histopathology": 1.6,
}
# NV, BKL, DF, VASC in HAM class order
DEFAULT_BENIGN = frozenset({1, 4, 5, 6})


class BalancingError(ValueError):
    pass


@dataclass(frozen=True)
class ClassCounts:
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 1 for c in self.counts):
            raise BalancingError(f"every class needs at least one example, got counts {list(self.counts)}")

    @property
    def total(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_labels(cls, labels: Sequence[int], n_classes: int) -> ClassCounts:
        return cls(tuple(int(c) for c in np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)))


def class_weights(counts: ClassCounts | Sequence[int], k: float = 1.0) -> np.ndarray:
    """``n_i = (N / N_i) ** k``."""
    if not isinstance(counts, ClassCounts):
        counts = ClassCounts(tuple(int(c) for c in counts))
    if k < 0:
        raise BalancingError(f"k must be non-negative, got {k}")
    c = np.asarray(counts.counts, dtype=np.float64)
    return (counts.total / c) ** k


@dataclass
class WeightTable:
    class_weights: np.ndarray
    k: float = 1.0
    diagnosis_multipliers: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    benign_classes: frozenset[int] = DEFAULT_BENIGN
    default_multiplier: float | None = None

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if (self.class_weights <= 0).any():
            raise BalancingError("class weights must be positive")
        missing = [m for m in DIAGNOSIS_METHODS if m not in self.diagnosis_multipliers]
        if missing:
            raise BalancingError(f"diagnosis multiplier table lacks {missing}")
        ramp = [self.diagnosis_multipliers[m] for m in DIAGNOSIS_METHODS]
        if any(v <= 0 for v in ramp):
            raise BalancingError("diagnosis multipliers must be positive")
        if any(a > b for a, b in zip(ramp, ramp[1:])):
            raise BalancingError(f"diagnosis multipliers must be non-decreasing in cost order, got {ramp}")

    @classmethod
    def from_counts(cls, counts: ClassCounts | Sequence[int], k: float = 1.0, **kw) -> WeightTable:
        return cls(class_weights(counts, k), k=k, **kw)


def diagnosis_weight(label: int, method: str, table: WeightTable) -> float:
    """Class weight, scaled by the diagnosis-method multiplier for benign classes only."""
    base = float(table.class_weights[label])
    if label not in table.benign_classes:
        return base
    if method in table.diagnosis_multipliers:
        return base * float(table.diagnosis_multipliers[method])
    if table.default_multiplier is not None:
        return base * table.default_multiplier
    raise BalancingError(f"unknown diagnosis method {method!r} for a benign sample")


def sample_weights(
    labels: Sequence[int], methods: Sequence[str] | None, table: WeightTable, use_diagnosis: bool
) -> np.ndarray:
    if not use_diagnosis:
        return table.class_weights[np.asarray(labels, dtype=int)]
    return np.array([diagnosis_weight(int(y), m, table) for y, m in zip(labels, methods)])


def _indices_by_class(labels: Sequence[int], n_classes: int | None) -> list[np.ndarray]:
    labels = np.asarray(labels, dtype=int)
    n_classes = n_classes if n_classes is not None else int(labels.max()) + 1
    groups = [np.flatnonzero(labels == c) for c in range(n_classes)]
    empty = [c for c, g in enumerate(groups) if len(g) == 0]
    if empty:
        raise BalancingError(f"classes {empty} have no examples")
    return groups


def oversample_pool(labels: Sequence[int], n_classes: int | None = None) -> np.ndarray:
    """Replicate each class's indices by cycling until all classes match the largest one."""
    groups = _indices_by_class(labels, n_classes)
    target = max(len(g) for g in groups)
    return np.concatenate([np.resize(g, target) for g in groups])


def oversample_batches(
    labels: Sequence[int], batch_size: int, rng: np.random.Generator, n_classes: int | None = None
) -> Iterator[np.ndarray]:
    """Endless batches drawn uniformly with replacement from the oversampled pool."""
    pool = oversample_pool(labels, n_classes)
    while True:
        yield pool[rng.integers(0, len(pool), size=batch_size)]


def balanced_batches(
    labels: Sequence[int], batch_size: int, rng: np.random.Generator, n_classes: int | None = None
) -> Iterator[np.ndarray]:
    """Endless batches holding exactly ``batch_size / C`` examples of every class.

    Each class walks through its own reshuffled permutation, so every example
    is visited once per pass over that class.
    """
    groups = _indices_by_class(labels, n_classes)
    n_c = len(groups)
    if batch_size % n_c:
        raise BalancingError(f"batch_size {batch_size} is not divisible by the number of classes {n_c}")
    per_class = batch_size // n_c
    orders = [rng.permutation(g) for g in groups]
    cursors = [0] * n_c
    while True:
        batch = []
        for c in range(n_c):
            take = []
            while len(take) < per_class:
                if cursors[c] == len(orders[c]):
                    orders[c] = rng.permutation(groups[c])
                    cursors[c] = 0
                n = min(per_class - len(take), len(orders[c]) - cursors[c])
                take.extend(orders[c][cursors[c] : cursors[c] + n])
                cursors[c] += n
            batch.extend(take)
        yield np.asarray(batch, dtype=int)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Plain sampling: a fresh permutation per pass, chunked into batches."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
