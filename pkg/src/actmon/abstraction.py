"""Per-neuron Gaussian interval abstractions over activation traces.

Fitting records, for every monitored neuron, the sample mean and the
Bessel-corrected sample standard deviation of its activation across a trace
dataset. A test activation vector is then judged neuron by neuron against
the closed interval ``[mean - w*std, mean + w*std]``, where the width
multiplier ``w`` defaults to 2 (about 95% two-sided Gaussian mass).

Two modes exist. The class-agnostic mode pools all records into one table;
it is the default and the one the conformal layer builds on. The per-class
mode keeps one table per label for classification-style settings.

All statistics are computed in float64 regardless of the float32 trace
storage. A neuron whose fitted deviation is exactly zero would make any
float jitter count as "outside"; such neurons instead use an absolute
tolerance of ``ZERO_SIGMA_TOL``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .traces import TraceDataset

ZERO_SIGMA_TOL = 1e-9

CLASS_AGNOSTIC = "class_agnostic"
PER_CLASS = "per_class"


@dataclass(frozen=True)
class StatsTable:
    """Per-neuron mean and standard deviation, parallel float64 arrays."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        std = np.ascontiguousarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise ValueError("statistics must be finite")
        if (std < 0.0).any():
            raise ValueError("standard deviations must be >= 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StatsTable):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    def __len__(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianAbstraction:
    """Fitted interval abstraction: one stats table, or one per class.

    Attributes:
        mode: "class_agnostic" or "per_class".
        width_multiplier: interval half-width in standard deviations (> 0).
        table: the pooled table (class_agnostic mode, else None).
        class_tables: label -> table map (per_class mode, else None).
        monitored: sorted neuron indices the checks inspect; defaults to all
            neurons of the fitted layer.
    """

    mode: str
    width_multiplier: float
    table: StatsTable | None
    class_tables: dict[int, StatsTable] | None
    monitored: np.ndarray

    def __post_init__(self) -> None:
        if self.mode not in (CLASS_AGNOSTIC, PER_CLASS):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.width_multiplier > 0.0:
            raise ValueError(f"width multiplier must be > 0, got {self.width_multiplier}")
        if (self.table is None) == (self.class_tables is None):
            raise ValueError("exactly one of table/class_tables must be set")
        if self.mode == CLASS_AGNOSTIC and self.table is None:
            raise ValueError("class_agnostic mode requires the pooled table")
        if self.mode == PER_CLASS and self.class_tables is not None and not self.class_tables:
            raise ValueError("per_class mode requires at least one class table")
        n = self.n_neurons
        monitored = np.ascontiguousarray(self.monitored, dtype=np.intp)
        if monitored.ndim != 1 or len(monitored) == 0:
            raise ValueError("monitored set must be a non-empty index list")
        if len(np.unique(monitored)) != len(monitored):
            raise ValueError("monitored indices must be unique")
        if monitored.min() < 0 or monitored.max() >= n:
            raise ValueError(f"monitored indices out of range for {n} neurons")
        object.__setattr__(self, "monitored", np.sort(monitored))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GaussianAbstraction):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.width_multiplier == other.width_multiplier
            and self.table == other.table
            and self.class_tables == other.class_tables
            and np.array_equal(self.monitored, other.monitored)
        )

    @property
    def n_neurons(self) -> int:
        if self.table is not None:
            return len(self.table)
        return len(next(iter(self.class_tables.values())))

    def table_for(self, class_label: int | None) -> StatsTable:
        if self.mode == CLASS_AGNOSTIC:
            return self.table
        if class_label is None:
            raise ValueError("per_class abstraction needs a class label")
        try:
            return self.class_tables[int(class_label)]
        except KeyError:
            raise ValueError(f"unknown class {class_label}") from None


def _fit_table(data: np.ndarray) -> StatsTable:
    """Column statistics in float64; Bessel-corrected deviation (n-1 divisor).

    Columns are sorted before reduction so the result is bit-identical under
    any permutation of the records, not just equal within rounding.
    """
    data = np.sort(np.asarray(data, dtype=np.float64), axis=0)
    return StatsTable(mean=data.mean(axis=0), std=data.std(axis=0, ddof=1))


def fit(
    dataset: TraceDataset,
    mode: str = CLASS_AGNOSTIC,
    width_multiplier: float = 2.0,
    monitored=None,
) -> GaussianAbstraction:
    """Fit per-neuron Gaussian statistics over a trace dataset.

    Args:
        dataset: fitting traces; needs >= 2 records (Bessel correction
            divides by n-1), and in per_class mode >= 2 per class with every
            record labeled.
        mode: "class_agnostic" (pool everything) or "per_class".
        width_multiplier: interval half-width in standard deviations.
        monitored: optional index list restricting the checked neurons.

    Raises:
        ValueError: on unlabeled data in per_class mode, or a class with
            fewer than 2 samples.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 records to fit a deviation (n-1 divisor)")
    if monitored is None:
        monitored = np.arange(dataset.n_neurons)
    data = dataset.activations.astype(np.float64)
    if mode == CLASS_AGNOSTIC:
        return GaussianAbstraction(
            mode=mode,
            width_multiplier=width_multiplier,
            table=_fit_table(data),
            class_tables=None,
            monitored=monitored,
        )
    if mode != PER_CLASS:
        raise ValueError(f"unknown mode {mode!r}")
    labels = dataset.labels
    if labels is None or (labels < 0).any():
        raise ValueError("per_class fit requires a class label on every record")
    tables: dict[int, StatsTable] = {}
    for label in np.unique(labels):
        rows = data[labels == label]
        if rows.shape[0] < 2:
            raise ValueError(f"class {int(label)} has {rows.shape[0]} sample(s), need >= 2")
        tables[int(label)] = _fit_table(rows)
    return GaussianAbstraction(
        mode=mode,
        width_multiplier=width_multiplier,
        table=None,
        class_tables=tables,
        monitored=monitored,
    )


def _outside_counts(abstraction: GaussianAbstraction, rows: np.ndarray, table: StatsTable) -> np.ndarray:
    """Outside-interval neuron counts per row, over the monitored set."""
    m = abstraction.monitored
    mean = table.mean[m]
    std = table.std[m]
    tol = np.where(std > 0.0, abstraction.width_multiplier * std, ZERO_SIGMA_TOL)
    return np.count_nonzero(np.abs(rows[:, m] - mean) > tol, axis=1)


def _check_vector(abstraction: GaussianAbstraction, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != abstraction.n_neurons:
        raise ValueError(
            f"activation length {x.shape[0]} does not match "
            f"{abstraction.n_neurons} fitted neurons"
        )
    if not np.isfinite(x).all():
        raise ValueError("activation vector must be finite (no NaN/Inf)")
    return x


def outside_fraction(abstraction: GaussianAbstraction, x, class_label: int | None = None) -> float:
    """Fraction of monitored neurons outside their fitted interval.

    The interval is closed: a value exactly on the boundary counts as
    inside. Zero-deviation neurons count as inside iff the activation is
    within ``ZERO_SIGMA_TOL`` of the fitted mean.
    """
    x = _check_vector(abstraction, x)
    table = abstraction.table_for(class_label)
    count = _outside_counts(abstraction, x[np.newaxis, :], table)[0]
    return float(count) / len(abstraction.monitored)


def outside_fractions(
    abstraction: GaussianAbstraction,
    dataset: TraceDataset,
) -> np.ndarray:
    """Vectorized ``outside_fraction`` over every record of a dataset.

    In per_class mode each record is scored against its own label's table.
    """
    if dataset.n_neurons != abstraction.n_neurons:
        raise ValueError(
            f"dataset has {dataset.n_neurons} neurons, abstraction fitted on "
            f"{abstraction.n_neurons}"
        )
    data = dataset.activations.astype(np.float64)
    m = len(abstraction.monitored)
    if abstraction.mode == CLASS_AGNOSTIC:
        return _outside_counts(abstraction, data, abstraction.table) / m
    labels = dataset.labels
    if labels is None or (labels < 0).any():
        raise ValueError("per_class scoring requires a class label on every record")
    out = np.empty(len(dataset), dtype=np.float64)
    for label in np.unique(labels):
        rows = labels == label
        table = abstraction.table_for(int(label))
        out[rows] = _outside_counts(abstraction, data[rows], table) / m
    return out


def percentage_check(
    abstraction: GaussianAbstraction,
    x,
    class_label: int | None = None,
    min_inside_fraction: float = 1.0,
) -> bool:
    """Legacy fixed-percentage monitor: enough neurons inside their intervals?

    True iff ``1 - outside_fraction >= min_inside_fraction``. A threshold of
    1.0 recovers the strict all-neurons condition; 0.0 is vacuously true.
    The conformal layer replaces this manual threshold with p-values.
    """
    if not 0.0 <= min_inside_fraction <= 1.0:
        raise ValueError(f"min_inside_fraction must be in [0,1], got {min_inside_fraction}")
    return 1.0 - outside_fraction(abstraction, x, class_label) >= min_inside_fraction
