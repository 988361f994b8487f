"""Activation-trace containers and the on-disk trace formats.

A trace dataset is a matrix of per-sample activation vectors with optional
integer class labels. Values are stored as 32-bit floats (typical inference
precision) and widened to 64-bit wherever statistics are computed.

Binary format (little-endian), extension ``.atrc`` by convention::

    magic      4 bytes  b"ATRC"
    version    u32      1
    n_samples  u32
    n_neurons  u32
    flags      u32      bit 0: label column present
    records    n_samples times:
        sample_id  u64
        label      i32   only if flagged; -1 encodes "no label"
        values     n_neurons x f32

CSV format: header ``sample_id,label,a0,a1,...``; the label cell is left
blank for unlabeled records. The binary round-trip is bit-exact; CSV relies
on shortest-repr float32 text, which reparses to identical float32 values.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"ATRC"
FORMAT_VERSION = 1
_FLAG_LABELS = 0x1
_HEADER = struct.Struct("<4sIIII")


class TraceParseError(ValueError):
    """A trace file violates the format contract."""


class HeaderFormatError(TraceParseError):
    """Magic, version, or header fields are malformed."""


class RowWidthError(TraceParseError):
    """A record does not match the width declared in the header."""


class NonFiniteValueError(TraceParseError):
    """An activation value is NaN or infinite."""


class TraceRecord(NamedTuple):
    sample_id: int
    activations: np.ndarray
    class_label: int | None


@dataclass(frozen=True)
class TraceDataset:
    """Immutable matrix of activation vectors, one row per sample.

    Attributes:
        sample_ids: unique ids, shape (n_samples,), dtype uint64.
        activations: shape (n_samples, n_neurons), dtype float32, all finite.
        labels: optional int32 labels, -1 meaning "no label" for that record;
            None when the dataset carries no label column at all.
    """

    sample_ids: np.ndarray
    activations: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        ids = np.ascontiguousarray(self.sample_ids, dtype=np.uint64)
        acts = np.ascontiguousarray(self.activations, dtype=np.float32)
        if acts.ndim != 2:
            raise ValueError(f"activations must be 2-D, got shape {acts.shape}")
        if acts.shape[1] == 0:
            raise ValueError("activation vectors must have length > 0")
        if ids.shape != (acts.shape[0],):
            raise ValueError(
                f"sample_ids shape {ids.shape} does not match "
                f"{acts.shape[0]} records"
            )
        if len(np.unique(ids)) != len(ids):
            raise ValueError("sample_ids must be unique")
        if not np.isfinite(acts).all():
            raise ValueError("activations must be finite (no NaN/Inf)")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int32)
            if labels.shape != (acts.shape[0],):
                raise ValueError("labels length does not match record count")
            if (labels < -1).any():
                raise ValueError("labels must be >= 0, or -1 for none")
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "labels", labels)

    @property
    def n_neurons(self) -> int:
        return self.activations.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def __len__(self) -> int:
        return self.activations.shape[0]

    def __getitem__(self, i: int) -> TraceRecord:
        label: int | None = None
        if self.labels is not None and self.labels[i] >= 0:
            label = int(self.labels[i])
        return TraceRecord(int(self.sample_ids[i]), self.activations[i], label)

    def __iter__(self) -> Iterator[TraceRecord]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceDataset):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.activations, other.activations)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    def subset(self, indices: np.ndarray) -> TraceDataset:
        """New dataset holding the given rows, in the given order."""
        indices = np.asarray(indices, dtype=np.intp)
        labels = None if self.labels is None else self.labels[indices]
        return TraceDataset(self.sample_ids[indices], self.activations[indices], labels)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint proper-training / calibration partition of one dataset."""

    proper: TraceDataset
    calibration: TraceDataset

    def __post_init__(self) -> None:
        if len(self.proper) == 0 or len(self.calibration) == 0:
            raise ValueError("both split parts must be non-empty")
        common = np.intersect1d(self.proper.sample_ids, self.calibration.sample_ids)
        if len(common):
            raise ValueError(f"split parts share sample_ids (e.g. {int(common[0])})")


def _record_dtype(n_neurons: int, labeled: bool) -> np.dtype:
    fields = [("sample_id", "<u8")]
    if labeled:
        fields.append(("label", "<i4"))
    fields.append(("values", "<f4", (n_neurons,)))
    return np.dtype(fields)


def dumps_binary(dataset: TraceDataset) -> bytes:
    """Serialize to the binary trace format. Round-trips bit-exactly."""
    labeled = dataset.has_labels
    flags = _FLAG_LABELS if labeled else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset), dataset.n_neurons, flags)
    records = np.empty(len(dataset), dtype=_record_dtype(dataset.n_neurons, labeled))
    records["sample_id"] = dataset.sample_ids
    if labeled:
        records["label"] = dataset.labels
    records["values"] = dataset.activations
    return header + records.tobytes()


def loads_binary(data: bytes) -> TraceDataset:
    """Parse the binary trace format; errors name the offending byte offset."""
    if len(data) < _HEADER.size:
        raise HeaderFormatError(
            f"file too short for header: {len(data)} bytes, need {_HEADER.size}"
        )
    magic, version, n_samples, n_neurons, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise HeaderFormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise HeaderFormatError(f"unsupported version {version} at byte 4")
    if n_neurons == 0:
        raise HeaderFormatError("n_neurons is 0 at byte 12")
    if n_samples == 0:
        raise HeaderFormatError("n_samples is 0 at byte 8; refusing empty dataset")
    labeled = bool(flags & _FLAG_LABELS)
    dtype = _record_dtype(n_neurons, labeled)
    expected = _HEADER.size + n_samples * dtype.itemsize
    if len(data) < expected:
        raise RowWidthError(
            f"truncated records: file ends at byte {len(data)}, "
            f"expected {expected} for {n_samples} x {n_neurons} values"
        )
    if len(data) > expected:
        raise RowWidthError(f"trailing data at byte {expected}")
    records = np.frombuffer(data, dtype=dtype, offset=_HEADER.size)
    values = records["values"]
    finite = np.isfinite(values)
    if not finite.all():
        rec, col = np.argwhere(~finite)[0]
        offset = (
            _HEADER.size + int(rec) * dtype.itemsize + dtype.fields["values"][1] + 4 * int(col)
        )
        raise NonFiniteValueError(
            f"non-finite activation at byte {offset} (record {rec}, neuron {col})"
        )
    labels = records["label"].astype(np.int32) if labeled else None
    if labels is not None and (labels < -1).any():
        rec = int(np.argwhere(labels < -1)[0][0])
        offset = _HEADER.size + rec * dtype.itemsize + 8
        raise TraceParseError(f"invalid label {int(labels[rec])} at byte {offset}")
    return TraceDataset(records["sample_id"].astype(np.uint64), values.astype(np.float32), labels)


def _dump_csv(dataset: TraceDataset, fh: io.TextIOBase) -> None:
    n = dataset.n_neurons
    fh.write("sample_id,label," + ",".join(f"a{i}" for i in range(n)) + "\n")
    for rec in dataset:
        label = "" if rec.class_label is None else str(rec.class_label)
        values = ",".join(str(v) for v in rec.activations)
        fh.write(f"{rec.sample_id},{label},{values}\n")


def _parse_csv(fh: io.TextIOBase) -> TraceDataset:
    header = fh.readline()
    if not header:
        raise HeaderFormatError("empty file, expected CSV header at line 1")
    cols = [c.strip() for c in header.rstrip("\n").split(",")]
    if len(cols) < 3 or cols[0] != "sample_id" or cols[1] != "label":
        raise HeaderFormatError(
            "line 1: header must start with 'sample_id,label,a0,...'"
        )
    expected = [f"a{i}" for i in range(len(cols) - 2)]
    if cols[2:] != expected:
        raise HeaderFormatError("line 1: activation columns must be a0,a1,...")
    n_neurons = len(cols) - 2

    ids: list[int] = []
    labels: list[int] = []
    rows: list[np.ndarray] = []
    any_label = False
    for lineno, line in enumerate(fh, start=2):
        line = line.strip()
        if not line:
            continue
        tokens = line.split(",")
        if len(tokens) != n_neurons + 2:
            raise RowWidthError(
                f"line {lineno}: {len(tokens) - 2} values under a "
                f"{n_neurons}-neuron header"
            )
        try:
            ids.append(int(tokens[0]))
        except ValueError:
            raise TraceParseError(f"line {lineno}: bad sample_id {tokens[0]!r}") from None
        token = tokens[1].strip()
        if token:
            try:
                label = int(token)
            except ValueError:
                raise TraceParseError(f"line {lineno}: bad label {token!r}") from None
            if label < -1:
                raise TraceParseError(f"line {lineno}: invalid label {label}")
            labels.append(label)
            any_label = any_label or label >= 0
        else:
            labels.append(-1)
        try:
            row = np.array([float(t) for t in tokens[2:]], dtype=np.float32)
        except ValueError:
            raise TraceParseError(f"line {lineno}: unparseable activation value") from None
        if not np.isfinite(row).all():
            col = int(np.argwhere(~np.isfinite(row))[0][0])
            raise NonFiniteValueError(
                f"line {lineno}: non-finite value in column a{col}"
            )
        rows.append(row)
    if not rows:
        raise HeaderFormatError("no records after the CSV header")
    return TraceDataset(
        np.array(ids, dtype=np.uint64),
        np.stack(rows),
        np.array(labels, dtype=np.int32) if any_label else None,
    )


def load_trace(path: str, format: str = "binary") -> TraceDataset:
    """Load a trace file.

    Args:
        path: file to read.
        format: "binary" or "csv".

    Raises:
        HeaderFormatError, RowWidthError, NonFiniteValueError: on malformed
            input, naming the byte or line offset.
    """
    if format == "binary":
        with open(path, "rb") as fh:
            return loads_binary(fh.read())
    if format == "csv":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return _parse_csv(fh)
    raise ValueError(f"unknown trace format {format!r}")


def save_trace(dataset: TraceDataset, path: str, format: str = "binary") -> None:
    """Write a trace file atomically (temp-then-rename).

    Refuses to write an empty dataset: the on-disk formats always carry at
    least one record.
    """
    if len(dataset) == 0:
        raise ValueError("refusing to write an empty dataset")
    if format == "binary":
        _atomic_write_bytes(path, dumps_binary(dataset))
    elif format == "csv":
        buf = io.StringIO()
        _dump_csv(dataset, buf)
        _atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    else:
        raise ValueError(f"unknown trace format {format!r}")


def _atomic_write_bytes(path: str, data: bytes) -> None:
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".actmon-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def split_dataset(dataset: TraceDataset, split_index: int, seed: int) -> DatasetSplit:
    """Seeded shuffle-then-cut split into proper-training and calibration sets.

    The first ``split_index`` records of the shuffled order become the proper
    set; the remainder the calibration set. Deterministic for a fixed seed.
    """
    n = len(dataset)
    if not 0 < split_index < n:
        raise ValueError(
            f"split_index must be in (0, {n}) so both parts are non-empty, "
            f"got {split_index}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        proper=dataset.subset(perm[:split_index]),
        calibration=dataset.subset(perm[split_index:]),
    )
