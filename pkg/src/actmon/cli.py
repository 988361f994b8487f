"""Command-line surface: fit, calibrate, check, perturb, experiment, report.

Exit codes: 0 on success, 1 on usage errors (bad flags or flag values), 2 on
data or validation errors (malformed files, dimension mismatches). Output
files are written atomically, inputs are never mutated, and every subcommand
is deterministic given identical inputs and flags.

The environment variable ``ACTMON_THREADS`` optionally caps internal
parallelism; it is propagated to the numeric backends' thread caps before
they load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

if "ACTMON_THREADS" in os.environ:
    _cap = os.environ["ACTMON_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1, per the CLI contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(ValueError):
    pass


def _sniff_format(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "binary"


def _load_traces(path: str):
    from . import traces

    return traces.load_trace(path, _sniff_format(path))


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actmon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit per-neuron statistics from traces")
    p.add_argument("--traces", required=True, help="trace file (.atrc binary, or .csv)")
    p.add_argument("--mode", choices=["class_agnostic", "per_class"], default="class_agnostic")
    p.add_argument("--k", type=float, default=2.0, help="interval width multiplier")
    p.add_argument("--out", required=True, help="output partial-monitor JSON")

    p = sub.add_parser("calibrate", help="attach calibration scores and a threshold")
    p.add_argument("--partial", required=True, help="partial-monitor JSON from 'fit'")
    p.add_argument("--traces", required=True, help="calibration trace file")
    p.add_argument("--tau", type=float, default=0.05, help="p-value threshold")
    p.add_argument("--layer", default="", help="monitored layer identifier")
    p.add_argument("--out", required=True, help="output monitor artifact JSON")

    p = sub.add_parser("check", help="render ID/OOD verdicts for a trace file")
    p.add_argument("--monitor", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit", choices=["jsonl", "csv"], default="jsonl")

    p = sub.add_parser("perturb", help="corrupt image tensors stored as flat traces")
    p.add_argument("--kind", choices=["gaussian", "impulse", "fgsm"], required=True)
    p.add_argument("--level", type=float, required=True,
                   help="variance / corruption probability / gradient step")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True, help="input image traces")
    p.add_argument("--out", required=True)
    p.add_argument("--network", help="network JSON (required for fgsm)")

    p = sub.add_parser("experiment", help="run the desk-scale experiment pipeline")
    p.add_argument("--plan", help="plan JSON; omit for the built-in default plan")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--save-monitor", help="also save the built monitor artifact")
    p.add_argument("--save-network", help="also save the reference network")

    p = sub.add_parser("report", help="render a report to CSV tables and figures")
    p.add_argument("--experiment", required=True, help="report JSON from 'experiment'")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true", help="skip the SVG bar charts")

    return parser


def _cmd_fit(args) -> int:
    from . import abstraction
    from .monitor import save_partial

    if args.k <= 0.0:
        raise UsageError(f"--k must be > 0, got {args.k:g}")
    dataset = _load_traces(args.traces)
    fitted = abstraction.fit(dataset, args.mode, args.k)
    save_partial(fitted, args.out)
    print(f"fitted {fitted.mode} abstraction: {fitted.n_neurons} neurons, k={args.k}")
    if fitted.mode == "per_class":
        sizes = {
            int(label): int((dataset.labels == label).sum())
            for label in sorted(set(dataset.labels.tolist()))
        }
        print("class sample counts: " + ", ".join(f"{c}: {n}" for c, n in sizes.items()))
    else:
        print(f"fitted from {len(dataset)} records")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    import hashlib
    from datetime import datetime, timezone

    from .icad import calibrate
    from .monitor import MonitorArtifact, MonitorConfig, Provenance, load_partial, save_monitor
    from .traces import dumps_binary

    if not 0.0 <= args.tau <= 1.0:
        raise UsageError(f"--tau must be in [0,1], got {args.tau:g}")
    fitted = load_partial(args.partial)
    dataset = _load_traces(args.traces)
    scores = calibrate(fitted, dataset)
    with open(args.partial, "rb") as fh:
        partial_bytes = fh.read()
    digest = hashlib.sha256(partial_bytes + dumps_binary(dataset)).hexdigest()
    artifact = MonitorArtifact(
        config=MonitorConfig(
            p_threshold=args.tau,
            width_multiplier=fitted.width_multiplier,
            mode=fitted.mode,
            layer=args.layer,
        ),
        abstraction=fitted,
        calibration=scores,
        provenance=Provenance(
            content_hash=digest,
            created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        ),
    )
    save_monitor(artifact, args.out)
    print(f"calibrated on {scores.size} records, tau={args.tau:g}")
    return EXIT_OK


def _cmd_check(args) -> int:
    from .monitor import check_batch, load_monitor, write_verdicts

    monitor = load_monitor(args.monitor)
    dataset = _load_traces(args.traces)
    verdicts, summary = check_batch(monitor, dataset)
    write_verdicts(verdicts, args.out, args.emit)
    print(f"ID: {summary.id_count}, OOD: {summary.ood_count}")
    return EXIT_OK


def _cmd_perturb(args) -> int:
    import numpy as np

    from .perturb import PerturbationSpec, apply_perturbation
    from .refnet import load_network
    from .traces import TraceDataset, save_trace

    if args.kind == "fgsm" and not args.network:
        raise UsageError("--network is required for --kind fgsm")
    spec = PerturbationSpec(args.kind, args.level, args.seed)
    dataset = _load_traces(args.input)
    images = dataset.activations.astype(np.float64)
    if args.kind == "fgsm":
        net = load_network(args.network)
        pixels = int(np.prod(net.input_shape))
        if pixels != dataset.n_neurons:
            raise ValueError(
                f"network expects {pixels} pixels, traces carry {dataset.n_neurons}"
            )
        images = images.reshape((len(dataset),) + net.input_shape)
        out = apply_perturbation(spec, images, net).reshape(len(dataset), pixels)
    else:
        out = apply_perturbation(spec, images)
    save_trace(
        TraceDataset(dataset.sample_ids, out.astype(np.float32), dataset.labels),
        args.out,
        _sniff_format(args.out),
    )
    print(f"perturbed {len(dataset)} tensors with {args.kind} level {args.level:g}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    from .experiment import ExperimentPlan, plan_from_json, run_experiment, save_report

    if args.plan:
        with open(args.plan, "r", encoding="utf-8") as fh:
            plan = plan_from_json(json.load(fh))
    else:
        plan = ExperimentPlan()
    if args.save_network:
        from .refnet import init_network, save_network

        save_network(init_network(plan.arch, plan.input_shape, plan.network_seed), args.save_network)
    report = run_experiment(plan)
    save_report(report, args.out)
    if args.save_monitor:
        from .experiment import build_plan_monitor
        from .monitor import save_monitor

        _, _, monitor, _ = build_plan_monitor(plan)
        save_monitor(monitor, args.save_monitor)
    for cond in report.conditions:
        print(f"{cond.name}: n={cond.n} ID={cond.id_count} OOD={cond.ood_count}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .experiment import load_report
    from .report import render_report

    report = load_report(args.experiment)
    written = render_report(report, args.out_dir, figures=not args.no_figures)
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "calibrate": _cmd_calibrate,
    "check": _cmd_check,
    "perturb": _cmd_perturb,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"actmon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as exc:
        print(f"actmon {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
