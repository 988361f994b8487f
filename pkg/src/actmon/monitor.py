"""Runtime decision layer: frozen monitor artifacts and ID/OOD verdicts.

A monitor bundles a fitted abstraction, the sorted calibration scores, and a
p-value threshold into one immutable, serializable artifact. Checking an
activation vector is a single pass over the monitored neurons plus one
binary search, so it is cheap enough for per-frame use; any number of
concurrent checks against one artifact are race-free.

Artifact JSON schema (version 1)::

    {
      "version": 1,
      "config": {"tau": ..., "k": ..., "mode": ..., "layer": ...},
      "stats": {"mu": [...], "sigma": [...]}          # class_agnostic
              | {"classes": {"<label>": {"mu": [...], "sigma": [...]}, ...}},
      "calibration": {"sorted_scores": [...], "n": ...},
      "provenance": {"hash": ..., "created": ...}
    }

``stats`` additionally carries a ``"monitored"`` index list when the checks
are restricted to a neuron subset. Floats are written with shortest
round-trip repr, so save/load is value-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import NamedTuple

import numpy as np

from .abstraction import (
    CLASS_AGNOSTIC,
    PER_CLASS,
    GaussianAbstraction,
    StatsTable,
    fit,
    outside_fraction,
    outside_fractions,
)
from .icad import CalibrationScores, PValue, calibrate, p_value
from .traces import TraceDataset, _atomic_write_bytes, dumps_binary

ARTIFACT_VERSION = 1

DECISION_ID = "ID"
DECISION_OOD = "OOD"


class MonitorFormatError(ValueError):
    """A monitor artifact file is malformed or has the wrong version."""


@dataclass(frozen=True)
class MonitorConfig:
    """Decision parameters frozen into the artifact.

    Attributes:
        p_threshold: p-value cutoff tau; p < tau (strictly) flags OOD, so
            tau = 0 disables alarms entirely.
        width_multiplier: interval half-width used by the abstraction.
        mode: abstraction mode, "class_agnostic" or "per_class".
        layer: free-text identifier of the monitored layer.
    """

    p_threshold: float
    width_multiplier: float = 2.0
    mode: str = CLASS_AGNOSTIC
    layer: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_threshold <= 1.0:
            raise ValueError(f"p threshold must be in [0,1], got {self.p_threshold}")
        if not self.width_multiplier > 0.0:
            raise ValueError("width multiplier must be > 0")
        if self.mode not in (CLASS_AGNOSTIC, PER_CLASS):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class Provenance:
    content_hash: str
    created: str


@dataclass(frozen=True)
class Verdict:
    sample_id: int
    score: float
    p: PValue
    decision: str


class BatchSummary(NamedTuple):
    id_count: int
    ood_count: int


@dataclass(frozen=True)
class MonitorArtifact:
    config: MonitorConfig
    abstraction: GaussianAbstraction
    calibration: CalibrationScores
    provenance: Provenance

    def __post_init__(self) -> None:
        if self.abstraction.mode != self.config.mode:
            raise ValueError("abstraction mode does not match config")
        if self.abstraction.width_multiplier != self.config.width_multiplier:
            raise ValueError("abstraction width multiplier does not match config")

    @property
    def n_neurons(self) -> int:
        return self.abstraction.n_neurons


def build_monitor(
    proper: TraceDataset, calibration: TraceDataset, config: MonitorConfig
) -> MonitorArtifact:
    """Fit on the proper set, calibrate on the calibration set, freeze.

    The two datasets must be disjoint by sample_id and dimensionally
    compatible. Provenance records a SHA-256 over both datasets' canonical
    binary serialization plus the creation time.
    """
    if proper.n_neurons != calibration.n_neurons:
        raise ValueError(
            f"proper ({proper.n_neurons} neurons) and calibration "
            f"({calibration.n_neurons} neurons) do not match"
        )
    if len(calibration) == 0:
        raise ValueError("calibration set must be non-empty")
    common = np.intersect1d(proper.sample_ids, calibration.sample_ids)
    if len(common):
        raise ValueError(f"proper and calibration share sample_ids (e.g. {int(common[0])})")
    abstraction = fit(proper, config.mode, config.width_multiplier)
    scores = calibrate(abstraction, calibration)
    digest = hashlib.sha256(dumps_binary(proper) + dumps_binary(calibration)).hexdigest()
    provenance = Provenance(
        content_hash=digest,
        created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    return MonitorArtifact(config, abstraction, scores, provenance)


def check(
    monitor: MonitorArtifact, x, sample_id: int, class_label: int | None = None
) -> Verdict:
    """Score one activation vector and decide ID vs OOD.

    Pure and deterministic: nonconformity score, p-value against the frozen
    calibration scores, OOD iff p < tau strictly.
    """
    score = outside_fraction(monitor.abstraction, x, class_label)
    p = p_value(monitor.calibration, score)
    decision = DECISION_OOD if p.value < monitor.config.p_threshold else DECISION_ID
    return Verdict(sample_id=sample_id, score=score, p=p, decision=decision)


def check_batch(
    monitor: MonitorArtifact, dataset: TraceDataset
) -> tuple[list[Verdict], BatchSummary]:
    """Elementwise check over a dataset, plus (ID, OOD) summary counts."""
    if len(dataset) == 0:
        return [], BatchSummary(0, 0)
    scores = outside_fractions(monitor.abstraction, dataset)
    n = monitor.calibration.size
    numerators = n - np.searchsorted(monitor.calibration.scores, scores, side="left")
    tau = monitor.config.p_threshold
    verdicts = []
    ood = 0
    for sid, score, num in zip(dataset.sample_ids, scores, numerators):
        p = PValue(value=int(num) / n, numerator=int(num), denominator=n)
        is_ood = p.value < tau
        ood += is_ood
        verdicts.append(
            Verdict(
                sample_id=int(sid),
                score=float(score),
                p=p,
                decision=DECISION_OOD if is_ood else DECISION_ID,
            )
        )
    return verdicts, BatchSummary(id_count=len(verdicts) - ood, ood_count=ood)


def _stats_to_json(abstraction: GaussianAbstraction) -> dict:
    if abstraction.mode == CLASS_AGNOSTIC:
        stats: dict = {
            "mu": abstraction.table.mean.tolist(),
            "sigma": abstraction.table.std.tolist(),
        }
    else:
        stats = {
            "classes": {
                str(label): {"mu": t.mean.tolist(), "sigma": t.std.tolist()}
                for label, t in sorted(abstraction.class_tables.items())
            }
        }
    if len(abstraction.monitored) != abstraction.n_neurons:
        stats["monitored"] = abstraction.monitored.tolist()
    return stats


def _stats_from_json(stats: dict, mode: str, width_multiplier: float) -> GaussianAbstraction:
    monitored = stats.get("monitored")
    if mode == CLASS_AGNOSTIC:
        table = StatsTable(np.array(stats["mu"]), np.array(stats["sigma"]))
        if monitored is None:
            monitored = np.arange(len(table))
        return GaussianAbstraction(mode, width_multiplier, table, None, np.asarray(monitored))
    tables = {
        int(label): StatsTable(np.array(entry["mu"]), np.array(entry["sigma"]))
        for label, entry in stats["classes"].items()
    }
    if monitored is None:
        monitored = np.arange(len(next(iter(tables.values()))))
    return GaussianAbstraction(mode, width_multiplier, None, tables, np.asarray(monitored))


def save_monitor(monitor: MonitorArtifact, path: str) -> None:
    """Write the artifact JSON atomically; floats survive bit-exactly."""
    doc = {
        "version": ARTIFACT_VERSION,
        "config": {
            "tau": monitor.config.p_threshold,
            "k": monitor.config.width_multiplier,
            "mode": monitor.config.mode,
            "layer": monitor.config.layer,
        },
        "stats": _stats_to_json(monitor.abstraction),
        "calibration": {
            "sorted_scores": monitor.calibration.scores.tolist(),
            "n": monitor.calibration.size,
        },
        "provenance": {
            "hash": monitor.provenance.content_hash,
            "created": monitor.provenance.created,
        },
    }
    _atomic_write_bytes(path, json.dumps(doc).encode("utf-8"))


def load_monitor(path: str) -> MonitorArtifact:
    """Parse and validate an artifact file; never returns a partial artifact."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MonitorFormatError(f"not a valid monitor artifact: {exc}") from None
    if not isinstance(doc, dict):
        raise MonitorFormatError("not a valid monitor artifact: top level must be an object")
    version = doc.get("version")
    if version != ARTIFACT_VERSION:
        raise MonitorFormatError(
            f"unsupported artifact version {version!r}, expected {ARTIFACT_VERSION}"
        )
    try:
        cfg = doc["config"]
        config = MonitorConfig(
            p_threshold=float(cfg["tau"]),
            width_multiplier=float(cfg["k"]),
            mode=str(cfg["mode"]),
            layer=str(cfg["layer"]),
        )
        abstraction = _stats_from_json(doc["stats"], config.mode, config.width_multiplier)
        cal = doc["calibration"]
        scores = CalibrationScores(np.array(cal["sorted_scores"], dtype=np.float64))
        if scores.size != int(cal["n"]):
            raise MonitorFormatError("calibration size field disagrees with the score list")
        prov = doc["provenance"]
        provenance = Provenance(content_hash=str(prov["hash"]), created=str(prov["created"]))
    except (KeyError, TypeError) as exc:
        raise MonitorFormatError(f"monitor artifact missing/invalid field: {exc}") from None
    return MonitorArtifact(config, abstraction, scores, provenance)


def save_partial(abstraction: GaussianAbstraction, path: str) -> None:
    """Write fitted statistics alone (no calibration yet): the 'fit' stage."""
    doc = {
        "version": ARTIFACT_VERSION,
        "partial": True,
        "config": {"k": abstraction.width_multiplier, "mode": abstraction.mode},
        "stats": _stats_to_json(abstraction),
    }
    _atomic_write_bytes(path, json.dumps(doc).encode("utf-8"))


def load_partial(path: str) -> GaussianAbstraction:
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MonitorFormatError(f"not a valid partial monitor: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != ARTIFACT_VERSION:
        raise MonitorFormatError(f"unsupported partial version {doc.get('version')!r}")
    if not doc.get("partial"):
        raise MonitorFormatError("expected a partial monitor (from 'fit'), got something else")
    try:
        cfg = doc["config"]
        return _stats_from_json(doc["stats"], str(cfg["mode"]), float(cfg["k"]))
    except (KeyError, TypeError) as exc:
        raise MonitorFormatError(f"partial monitor missing/invalid field: {exc}") from None


def write_verdicts(verdicts, path: str, emit: str = "jsonl") -> None:
    """Write a verdict stream as JSON-lines or CSV (deterministic bytes)."""
    if emit == "jsonl":
        lines = [
            json.dumps(
                {
                    "sample_id": v.sample_id,
                    "score": v.score,
                    "p_num": v.p.numerator,
                    "p_den": v.p.denominator,
                    "decision": v.decision,
                }
            )
            for v in verdicts
        ]
    elif emit == "csv":
        lines = ["sample_id,score,p_num,p_den,decision"]
        lines += [
            f"{v.sample_id},{v.score!r},{v.p.numerator},{v.p.denominator},{v.decision}"
            for v in verdicts
        ]
    else:
        raise ValueError(f"unknown verdict format {emit!r}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
