"""Desk-scale reproduction of the monitoring experiments.

The pipeline synthesizes structured in-distribution images, traces one
hidden layer of the reference network, builds a monitor from a proper/
calibration split, and then evaluates held-out ID inputs, a sweep of
perturbation levels, and a foreign input family with shifted statistics.
The output is a report of per-condition ID/OOD counts and p-value
histograms, deterministic for a fixed plan.

ID inputs are seeded low-frequency sinusoid patterns with small per-sample
variation plus pixel noise; the foreign family uses a different frequency
band and a shifted mean so that its activations land outside the calibrated
score range. Real datasets and real detectors are out of scope; the point
is that trends (p-values falling with severity, foreign inputs collapsing
to p = 0) are reproducible on a desk.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .icad import PValue
from .monitor import MonitorArtifact, MonitorConfig, build_monitor, check_batch
from .perturb import PerturbationSpec, apply_perturbation
from .refnet import Network, forward_with_trace, init_network, monitored_layer_index
from .traces import TraceDataset, _atomic_write_bytes, split_dataset

REPORT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of one synthetic image family.

    The base pattern is a sinusoid with the given frequency (cycles per
    image edge), orientation, and phase; per-sample randomness adds a phase
    wobble, a smooth low-amplitude variation field, and pixel noise.
    """

    frequency: float = 1.3
    orientation: float = 0.6
    phase: float = 0.0
    mean: float = 0.5
    amplitude: float = 0.42
    variation: float = 0.04
    noise_std: float = 0.02


def synth_inputs(spec: GeneratorSpec, n: int, shape: tuple[int, int], seed) -> np.ndarray:
    """Draw ``n`` images of the given family, values clipped to [0, 1]."""
    h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    axis = math.cos(spec.orientation) * xx + math.sin(spec.orientation) * yy
    images = np.empty((n, h, w), dtype=np.float64)
    two_pi = 2.0 * math.pi
    for i in range(n):
        wobble = rng.normal(0.0, 0.15)
        base = spec.mean + spec.amplitude * np.sin(
            two_pi * spec.frequency * axis + spec.phase + wobble
        )
        ripple = np.zeros_like(base)
        for _ in range(3):
            freq = rng.uniform(0.5, 2.0)
            theta = rng.uniform(0.0, two_pi)
            psi = rng.uniform(0.0, two_pi)
            direction = math.cos(theta) * xx + math.sin(theta) * yy
            ripple += rng.normal(0.0, spec.variation) * np.sin(two_pi * freq * direction + psi)
        noise = rng.normal(0.0, spec.noise_std, size=base.shape)
        images[i] = np.clip(base + ripple + noise, 0.0, 1.0)
    return images


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything a run needs; two runs with equal plans give equal reports."""

    arch: tuple = (
        ("conv2d", 3),
        ("leaky_relu",),
        ("dense", 48),
        ("batchnorm",),
        ("leaky_relu",),
        ("dense", 8),
    )
    input_shape: tuple[int, int] = (16, 16)
    network_seed: int = 7
    n_proper: int = 500
    n_calibration: int = 100
    n_test: int = 100
    sweep: tuple[PerturbationSpec, ...] = (
        PerturbationSpec("gaussian", 0.02, seed=11),
        PerturbationSpec("gaussian", 0.04, seed=12),
        PerturbationSpec("gaussian", 0.06, seed=13),
        PerturbationSpec("impulse", 0.03, seed=21),
        PerturbationSpec("impulse", 0.06, seed=22),
        PerturbationSpec("fgsm", 0.02, seed=31),
        PerturbationSpec("fgsm", 0.04, seed=32),
        PerturbationSpec("fgsm", 0.06, seed=33),
    )
    id_generator: GeneratorSpec = GeneratorSpec()
    foreign_generator: GeneratorSpec = GeneratorSpec(
        frequency=6.0, orientation=1.9, mean=0.62, amplitude=0.3
    )
    p_threshold: float = 0.05
    width_multiplier: float = 2.0
    layer: str | int = "last_leaky_relu"
    n_bins: int = 20
    seed: int = 2024

    def validate(self) -> None:
        """Reject inconsistent plans before any compute happens."""
        if self.n_proper < 2:
            raise ValueError("n_proper must be >= 2")
        if self.n_calibration < 1:
            raise ValueError("n_calibration must be >= 1")
        if self.n_test < 1:
            raise ValueError("n_test must be >= 1")
        if not self.sweep:
            raise ValueError("perturbation sweep must be non-empty")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if not 0.0 <= self.p_threshold <= 1.0:
            raise ValueError("p threshold must be in [0,1]")
        if not self.width_multiplier > 0.0:
            raise ValueError("width multiplier must be > 0")


@dataclass(frozen=True)
class ConditionResult:
    """Counts and p-value histogram for one evaluation condition."""

    name: str
    n: int
    id_count: int
    ood_count: int
    bin_edges: tuple[float, ...]
    bin_counts: tuple[int, ...]
    mean_p: float


@dataclass(frozen=True)
class ExperimentReport:
    conditions: tuple[ConditionResult, ...]
    metadata: dict = field(default_factory=dict)

    def condition(self, name: str) -> ConditionResult:
        for cond in self.conditions:
            if cond.name == name:
                return cond
        raise KeyError(f"no condition named {name!r}")


def histogram(p_values, n_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width, right-closed histogram of p-values over [0, 1].

    Bin b covers (b/n_bins, (b+1)/n_bins], except the first which also
    includes 0. Exact-count p-values are binned with integer arithmetic, so
    boundary values like 0.05 never land in the wrong bin through float
    rounding; bare floats fall back to float binning.

    Returns:
        (edges, counts): n_bins+1 edges and n_bins integer counts summing to
        the number of inputs.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    counts = np.zeros(n_bins, dtype=np.int64)
    for p in p_values:
        if isinstance(p, PValue):
            # ceil(num * n_bins / den) - 1, clamped to bin 0 for p == 0
            b = -((-p.numerator * n_bins) // p.denominator) - 1
        else:
            b = math.ceil(float(p) * n_bins) - 1
        counts[min(max(b, 0), n_bins - 1)] += 1
    return np.linspace(0.0, 1.0, n_bins + 1), counts


def trace_dataset(
    net: Network, images: np.ndarray, trace_index: int, start_id: int = 0
) -> TraceDataset:
    """Trace one layer for a batch of images; rows stored as float32."""
    rows = np.stack(
        [forward_with_trace(net, img)[1][trace_index] for img in images]
    ).astype(np.float32)
    ids = np.arange(start_id, start_id + len(rows), dtype=np.uint64)
    return TraceDataset(ids, rows)


def _condition(
    name: str, monitor: MonitorArtifact, dataset: TraceDataset, n_bins: int
) -> ConditionResult:
    verdicts, summary = check_batch(monitor, dataset)
    p_values = [v.p for v in verdicts]
    edges, counts = histogram(p_values, n_bins)
    mean_p = float(np.mean([p.value for p in p_values])) if p_values else 0.0
    return ConditionResult(
        name=name,
        n=len(dataset),
        id_count=summary.id_count,
        ood_count=summary.ood_count,
        bin_edges=tuple(edges.tolist()),
        bin_counts=tuple(int(c) for c in counts),
        mean_p=mean_p,
    )


def build_plan_monitor(plan: ExperimentPlan):
    """Construct the plan's network and fitted monitor (the setup half).

    Returns ``(net, trace_index, monitor, split)`` so callers can reuse the
    calibration split or persist the artifact. Deterministic per plan.
    """
    plan.validate()
    seeds = np.random.SeedSequence(plan.seed).spawn(4)
    train_seed, split_entropy = seeds[0], seeds[3]
    split_seed = int(split_entropy.generate_state(1)[0])

    net = init_network(plan.arch, plan.input_shape, plan.network_seed)
    trace_index = monitored_layer_index(net, plan.layer)

    n_train = plan.n_proper + plan.n_calibration
    train_images = synth_inputs(plan.id_generator, n_train, plan.input_shape, train_seed)
    train_traces = trace_dataset(net, train_images, trace_index)
    split = split_dataset(train_traces, plan.n_proper, split_seed)

    config = MonitorConfig(
        p_threshold=plan.p_threshold,
        width_multiplier=plan.width_multiplier,
        mode="class_agnostic",
        layer=str(plan.layer),
    )
    return net, trace_index, build_monitor(split.proper, split.calibration, config), split


def run_experiment(plan: ExperimentPlan) -> ExperimentReport:
    """Run the full desk-scale protocol for one plan.

    Builds the reference network, fits and calibrates the monitor on
    synthetic ID traces, then evaluates the held-out ID baseline, every
    sweep entry (each perturbing the same held-out inputs), and the foreign
    family. Condition order is: "id", the sweep in plan order, "foreign".
    """
    net, trace_index, monitor, _ = build_plan_monitor(plan)
    seeds = np.random.SeedSequence(plan.seed).spawn(4)
    test_seed, foreign_seed = seeds[1], seeds[2]
    n_train = plan.n_proper + plan.n_calibration

    test_images = synth_inputs(plan.id_generator, plan.n_test, plan.input_shape, test_seed)
    foreign_images = synth_inputs(
        plan.foreign_generator, plan.n_test, plan.input_shape, foreign_seed
    )

    conditions = [
        _condition(
            "id",
            monitor,
            trace_dataset(net, test_images, trace_index, start_id=n_train),
            plan.n_bins,
        )
    ]
    for spec in plan.sweep:
        perturbed = apply_perturbation(spec, test_images, net)
        dataset = trace_dataset(net, perturbed, trace_index, start_id=n_train)
        conditions.append(_condition(f"{spec.kind}_{spec.level:g}", monitor, dataset, plan.n_bins))
    conditions.append(
        _condition(
            "foreign",
            monitor,
            trace_dataset(net, foreign_images, trace_index, start_id=n_train),
            plan.n_bins,
        )
    )

    metadata = {
        "plan": plan_to_json(plan),
        "trace_index": trace_index,
        "n_neurons": monitor.n_neurons,
        "calibration_max_score": float(monitor.calibration.scores[-1]),
    }
    return ExperimentReport(conditions=tuple(conditions), metadata=metadata)


def plan_to_json(plan: ExperimentPlan) -> dict:
    doc = asdict(plan)
    doc["sweep"] = [asdict(s) for s in plan.sweep]
    doc["id_generator"] = asdict(plan.id_generator)
    doc["foreign_generator"] = asdict(plan.foreign_generator)
    doc["arch"] = [list(entry) if isinstance(entry, tuple) else entry for entry in plan.arch]
    doc["input_shape"] = list(plan.input_shape)
    return doc


def plan_from_json(doc: dict) -> ExperimentPlan:
    """Build a plan from a JSON document; unknown keys are rejected."""
    known = {f for f in ExperimentPlan.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown plan fields: {sorted(unknown)}")
    kwargs: dict = {}
    if "arch" in doc:
        kwargs["arch"] = tuple(
            tuple(e) if isinstance(e, (list, tuple)) else (e,) for e in doc["arch"]
        )
    if "input_shape" in doc:
        kwargs["input_shape"] = tuple(doc["input_shape"])
    if "sweep" in doc:
        kwargs["sweep"] = tuple(PerturbationSpec(**entry) for entry in doc["sweep"])
    for key in ("id_generator", "foreign_generator"):
        if key in doc:
            kwargs[key] = GeneratorSpec(**doc[key])
    for key in known - {"arch", "input_shape", "sweep", "id_generator", "foreign_generator"}:
        if key in doc:
            kwargs[key] = doc[key]
    plan = ExperimentPlan(**kwargs)
    plan.validate()
    return plan


def report_to_json(report: ExperimentReport) -> dict:
    return {
        "version": REPORT_VERSION,
        "metadata": report.metadata,
        "conditions": [asdict(c) for c in report.conditions],
    }


def report_from_json(doc: dict) -> ExperimentReport:
    if not isinstance(doc, dict) or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {doc.get('version')!r}")
    conditions = tuple(
        ConditionResult(
            name=str(c["name"]),
            n=int(c["n"]),
            id_count=int(c["id_count"]),
            ood_count=int(c["ood_count"]),
            bin_edges=tuple(float(e) for e in c["bin_edges"]),
            bin_counts=tuple(int(b) for b in c["bin_counts"]),
            mean_p=float(c["mean_p"]),
        )
        for c in doc["conditions"]
    )
    return ExperimentReport(conditions=conditions, metadata=doc.get("metadata", {}))


def save_report(report: ExperimentReport, path: str) -> None:
    _atomic_write_bytes(path, json.dumps(report_to_json(report), indent=1).encode("utf-8"))


def load_report(path: str) -> ExperimentReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_json(json.load(fh))
