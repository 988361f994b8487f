"""actmon: runtime out-of-distribution monitoring for activation traces.

Fits per-neuron Gaussian interval abstractions over recorded neural-network
activations, wraps them in inductive conformal anomaly detection to turn
nonconformity scores into p-values, and flags inputs whose p-value drops
below a configured threshold. Ships a small reference network and
perturbation generators so the whole pipeline runs at desk scale.

Submodules are imported lazily; ``import actmon`` is cheap.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # traces
    "TraceDataset": "traces",
    "TraceRecord": "traces",
    "DatasetSplit": "traces",
    "TraceParseError": "traces",
    "HeaderFormatError": "traces",
    "RowWidthError": "traces",
    "NonFiniteValueError": "traces",
    "load_trace": "traces",
    "save_trace": "traces",
    "split_dataset": "traces",
    # refnet
    "Network": "refnet",
    "Dense": "refnet",
    "Conv2D": "refnet",
    "BatchNorm": "refnet",
    "LeakyReLU": "refnet",
    "ForwardTrace": "refnet",
    "forward": "refnet",
    "forward_with_trace": "refnet",
    "input_gradient": "refnet",
    "leaky_relu": "refnet",
    "init_network": "refnet",
    "monitored_layer_index": "refnet",
    "save_network": "refnet",
    "load_network": "refnet",
    # perturb
    "PerturbationSpec": "perturb",
    "gaussian_noise": "perturb",
    "impulse_noise": "perturb",
    "fgsm": "perturb",
    "apply_perturbation": "perturb",
    # abstraction
    "GaussianAbstraction": "abstraction",
    "StatsTable": "abstraction",
    "fit": "abstraction",
    "outside_fraction": "abstraction",
    "outside_fractions": "abstraction",
    "percentage_check": "abstraction",
    # icad
    "CalibrationScores": "icad",
    "PValue": "icad",
    "nonconformity": "icad",
    "calibrate": "icad",
    "p_value": "icad",
    "cad_p_value": "icad",
    # monitor
    "MonitorConfig": "monitor",
    "MonitorArtifact": "monitor",
    "MonitorFormatError": "monitor",
    "Verdict": "monitor",
    "BatchSummary": "monitor",
    "build_monitor": "monitor",
    "check": "monitor",
    "check_batch": "monitor",
    "save_monitor": "monitor",
    "load_monitor": "monitor",
    "write_verdicts": "monitor",
    # experiment
    "ExperimentPlan": "experiment",
    "ExperimentReport": "experiment",
    "ConditionResult": "experiment",
    "GeneratorSpec": "experiment",
    "run_experiment": "experiment",
    "build_plan_monitor": "experiment",
    "histogram": "experiment",
    "synth_inputs": "experiment",
    "trace_dataset": "experiment",
    "save_report": "experiment",
    "load_report": "experiment",
    # report
    "render_report": "report",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
