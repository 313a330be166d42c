"""Command-line entry point wiring every subsystem.

Exit codes: 0 success, 1 validation/check failure, 2 usage error.
Diagnostics go to stderr; every run prints its resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__, dataset_io, gradcheck, harness, metrics
from .grammar import FrameSemantics, GrammarError, parse, render
from .kernels import BACKEND
from .vocab import load_label_space, packaged_config_path


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: str(v) for k, v in vars(args).items() if k != "func"}
    print(f"[surgscene {__version__} | kernels={BACKEND}] {resolved}", file=sys.stderr)


def _load_space(path: str | None):
    if path is None:
        path = packaged_config_path("cholect45_label_space.json")
    return load_label_space(path)


# ---------------------------------------------------------------------------
# Subcommand handlers (each returns a process exit code)


def cmd_validate_dataset(args: argparse.Namespace) -> int:
    space_path = args.label_space or Path(args.root) / "label_space.json"
    space = load_label_space(space_path)
    try:
        _, stats, issues = dataset_io.load_dataset(args.root, space, strict=args.strict)
    except dataset_io.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    if issues:
        for issue in issues:
            print(f"issue: {issue}", file=sys.stderr)
        return 1
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    space = _load_space(args.label_space)
    records = json.loads(Path(args.infile).read_text())
    rendered = []
    for record in records:
        triplets = tuple(
            tuple(space.valid_triplets[k]) if isinstance(k, int) else tuple(k)
            for k in record["triplets"]
        )
        semantics = FrameSemantics(
            frame_index=record["frame"], phase=record["phase"], triplets=triplets
        )
        rendered.append(
            {
                "frame": record["frame"],
                "text": render(semantics, record.get("think", ""), space),
            }
        )
    Path(args.out).write_text(json.dumps(rendered, indent=2) + "\n")
    print(f"rendered {len(rendered)} frame(s) -> {args.out}", file=sys.stderr)
    return 0


def cmd_parse(args: argparse.Namespace) -> int:
    space = _load_space(args.label_space)
    records = json.loads(Path(args.infile).read_text())
    parsed = []
    failures = 0
    for record in records:
        try:
            output = parse(record["text"], space, frame_index=record.get("frame", 0))
        except GrammarError as exc:
            failures += 1
            parsed.append(
                {
                    "frame": record.get("frame", 0),
                    "error": type(exc).__name__,
                    "message": str(exc),
                }
            )
            continue
        parsed.append(
            {
                "frame": output.semantics.frame_index,
                "phase": output.semantics.phase,
                "triplets": [list(t) for t in output.semantics.triplets],
                "think": output.think_text,
                "seg_markers": [
                    {
                        "entity_kind": m.entity_kind,
                        "triplet_index": m.triplet_index,
                        "label_id": m.label_id,
                        "token_position": m.token_position,
                    }
                    for m in output.seg_markers
                ],
            }
        )
    Path(args.out).write_text(json.dumps(parsed, indent=2) + "\n")
    print(
        f"parsed {len(parsed) - failures}/{len(parsed)} frame(s) -> {args.out}",
        file=sys.stderr,
    )
    return 1 if failures else 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    ops = gradcheck.MODULE_ALIASES.get(args.module, (args.module,))
    try:
        results = gradcheck.run_gradcheck(ops, n_seeds=args.seeds)
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = False
    for name, error in results.items():
        status = "ok" if error <= args.tolerance else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{name:12s} max rel err {error:10.3e}  {status}")
    return 1 if failed else 0


def cmd_synth(args: argparse.Namespace) -> int:
    synth_cfg, _, _ = harness.load_run_config(args.config)
    stats = harness.generate_synthetic(synth_cfg, args.out)
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    return 0


def _ensure_dataset(args: argparse.Namespace, synth_cfg) -> Path:
    if args.dataset is not None:
        return Path(args.dataset)
    dataset_dir = Path(args.out) / "dataset"
    if not (dataset_dir / "synth_config.json").is_file():
        harness.generate_synthetic(synth_cfg, dataset_dir)
    return dataset_dir


def cmd_train(args: argparse.Namespace) -> int:
    synth_cfg, train_cfg, weights = harness.load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_root = _ensure_dataset(args, synth_cfg)
    started = time.perf_counter()
    try:
        manifest, params = harness.train(
            dataset_root, train_cfg, weights, ablation=args.ablation
        )
    except harness.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - started
    manifest.wall_clock_seconds = elapsed
    manifest.write(out / "manifest.json")
    params.save(out / "checkpoint.bin")
    report = metrics.MetricReport.from_dict(manifest.metrics)
    print(metrics.format_report(report, title=f"ablation={args.ablation}"))
    print(f"wall clock: {elapsed:.1f}s -> {out / 'manifest.json'}", file=sys.stderr)
    (out / "timing.json").write_text(
        json.dumps({"wall_clock_seconds": elapsed}) + "\n"
    )
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    synth_cfg, train_cfg, weights = harness.load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_root = _ensure_dataset(args, synth_cfg)
    manifests, aggregate = harness.crossval(
        dataset_root, train_cfg, weights, ablation=args.ablation
    )
    for fold, manifest in enumerate(manifests, start=1):
        manifest.write(out / f"fold{fold}_manifest.json")
    payload = {
        name: {"mean": mean, "std": std} for name, (mean, std) in aggregate.items()
    }
    (out / "aggregate.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    print(metrics.format_aggregate(aggregate))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    space = _load_space(args.label_space)
    try:
        if args.folds:
            folds = dataset_io.load_folds(args.folds)
            fold_reports = {}
            for fold_id in sorted(folds):
                fold_reports[fold_id] = harness.evaluate_prediction_files(
                    args.pred, args.gt, space, video_ids=sorted(folds[fold_id])
                )
            aggregate = metrics.crossval_aggregate(
                list(fold_reports.values()), expected_folds=5
            )
            payload = {
                "folds": {
                    str(k): r.to_dict() for k, r in sorted(fold_reports.items())
                },
                "aggregate": {
                    name: {"mean": mean, "std": std}
                    for name, (mean, std) in aggregate.items()
                },
            }
            print(metrics.format_aggregate(aggregate))
        else:
            report = harness.evaluate_prediction_files(args.pred, args.gt, space)
            payload = report.to_dict()
            print(metrics.format_report(report))
    except dataset_io.DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"report -> {args.report}", file=sys.stderr)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    manifest = harness.RunManifest.read(args.manifest)
    if args.format == "json":
        print(json.dumps(manifest.metrics, indent=2, sort_keys=True))
    else:
        report = metrics.MetricReport.from_dict(manifest.metrics)
        print(metrics.format_report(report, title=f"ablation={manifest.ablation}"))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    bench_dir = Path(__file__).resolve().parents[2] / "benchmarks"
    sys.path.insert(0, str(bench_dir))
    try:
        import bench_kernels
    except ImportError:
        print("error: benchmarks/bench_kernels.py not found", file=sys.stderr)
        return 1
    bench_kernels.main(repeat=args.repeat)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgscene",
        description="Structured surgical scene reasoning/grounding toolkit",
    )
    parser.add_argument(
        "--version", action="version", version=f"surgscene {__version__} (schema 1)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-dataset", help="validate an annotation dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--label-space", default=None)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_validate_dataset)

    p = sub.add_parser("render", help="render semantics records to template text")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--label-space", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("parse", help="parse template text back to semantics")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--label-space", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="desk-scale end-to-end training")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", default="full", choices=harness.ABLATIONS)
    p.add_argument("--dataset", default=None, help="existing dataset root")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="5-fold cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", default="full", choices=harness.ABLATIONS)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default="crossval")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("eval", help="score prediction files against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--label-space", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print a run manifest's metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--format", default="table", choices=("table", "json"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="compare compiled vs python kernels")
    p.add_argument("--repeat", type=int, default=200)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
