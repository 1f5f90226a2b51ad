from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from . import __version__
from .config import settings
from .logging import configure_logging
from .schemas import BoundaryMode, ExpandKernel, ExperimentSpec, Method, NsctConfig, QnrConfig
from .services.fusion import FusionError, run_method
from .services.harness import ProtocolError, make_scene, qnr_curve, run_protocol
from .services.metrics import MetricConsistencyError, MetricError, full_report, reference_scores
from .services.nsct import NsctError, selftest
from .services.raster import RasterError, expand_multiband, load_inputs, load_multiband, save_multiband
from .telemetry import CLI_FAILURES, export_textfile
from .utils.json import canonical_json, load_json_file, to_jsonable, write_json

logger = configure_logging()

DOMAIN_ERRORS = (
    RasterError,
    NsctError,
    FusionError,
    MetricError,
    MetricConsistencyError,
    ProtocolError,
    ValidationError,
    OSError,
    ValueError,
)


class CliUsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as one JSON line on stderr and exits 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        _emit_error("UsageError", message)
        raise SystemExit(2)


def _emit_error(name: str, detail: str) -> None:
    sys.stderr.write(json.dumps({"status": "error", "error": name, "detail": detail}) + "\n")


def _one_line(exc: BaseException) -> str:
    lines = [line.strip() for line in str(exc).splitlines() if line.strip()]
    return "; ".join(lines) or type(exc).__name__


def _emit(payload: dict[str, Any]) -> None:
    sys.stdout.write(canonical_json(payload) + "\n")


def _csv_floats(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from exc


def _csv_ints(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from exc


def _csv_methods(value: str) -> list[str]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    allowed = {m.value for m in Method}
    unknown = [n for n in names if n not in allowed]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown method(s) {unknown}; choose from {sorted(allowed)}")
    return names


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration; flags override its values")
    parser.add_argument("--threads", type=_positive_int, help=f"worker cap (default {settings.MAX_WORKERS})")


def _add_fusion_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--a", type=float, help="pin the injection exponent; omitted means QNR grid search")
    parser.add_argument("--weights", type=_csv_floats, help="pin band weights, e.g. 0.25,0.25,0.25,0.25")
    parser.add_argument("--grid-step", type=float, help=f"exponent grid step (default {settings.GRID_STEP})")
    parser.add_argument("--levels", type=int, help="NSCT pyramid levels")
    parser.add_argument("--dirs", type=_csv_ints, help="NSCT directions per level, e.g. 8,8")
    parser.add_argument("--boundary", choices=[b.value for b in BoundaryMode], help="NSCT boundary extension")
    parser.add_argument("--kernel", choices=[k.value for k in ExpandKernel], help="MS interpolation kernel")
    parser.add_argument("--depth", type=int, choices=(8, 16), help="bit depth of written rasters")
    parser.add_argument("--qnr-window", type=int, help=f"QNR block size (default {settings.QNR_WINDOW})")


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", help="real-data manifest (PAN + MS); runs the reduced-resolution protocol")
    parser.add_argument("--seed", type=int, help="synthetic scene seed")
    parser.add_argument("--size", type=int, help="synthetic scene size in PAN pixels")
    parser.add_argument("--bands", type=int, help="synthetic scene band count")
    parser.add_argument("--ratio", type=int, help=f"PAN/MS resolution ratio (default {settings.DEFAULT_RATIO})")
    parser.add_argument("--out", help=f"output directory (default {settings.OUTPUT_DIR})")
    parser.add_argument("--q4-block", type=int, help=f"Q4 block size (default {settings.Q4_BLOCK})")
    parser.add_argument("--bins", type=int, help=f"histogram bins (default {settings.HISTOGRAM_BINS})")
    parser.add_argument("--histogram-band", type=int, help="band index for histogram comparison (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="pansharp", description="Pan-sharpening fusion and quality assessment")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    fuse = sub.add_parser("fuse", help="fuse one PAN/MS manifest with one method")
    _add_common(fuse)
    fuse.add_argument("--method", choices=[m.value for m in Method if m is not Method.oracle])
    fuse.add_argument("--manifest", help="manifest with MS bands and a PAN band")
    fuse.add_argument("--reference", help="optional reference manifest to score the result against")
    fuse.add_argument("--out", help="directory for fused rasters and report.json")
    _add_fusion_flags(fuse)

    metrics = sub.add_parser("metrics", help="score fused bands against a reference")
    _add_common(metrics)
    metrics.add_argument("--fused", required=True, help="fused manifest or directory")
    metrics.add_argument("--reference", required=True, help="reference manifest or directory")
    metrics.add_argument("--inputs", help="PAN/MS manifest the fusion used; enables QNR")
    metrics.add_argument("--ratio", type=int, help="PAN/MS resolution ratio for ERGAS")
    metrics.add_argument("--q4-block", type=int, help=f"Q4 block size (default {settings.Q4_BLOCK})")
    metrics.add_argument("--qnr-window", type=int, help=f"QNR block size (default {settings.QNR_WINDOW})")
    metrics.add_argument("--out", help="write the scores to this JSON file")

    protocol = sub.add_parser("protocol", help="run every method and write the comparison report")
    _add_common(protocol)
    protocol.add_argument("--methods", type=_csv_methods, help="comma-separated methods")
    _add_experiment_flags(protocol)
    _add_fusion_flags(protocol)

    curve = sub.add_parser("qnr-curve", help="sweep the injection exponent and write QNR versus a")
    _add_common(curve)
    curve.add_argument("--method", choices=["adaptive-brovey", "improved-adaptive-brovey"])
    _add_experiment_flags(curve)
    _add_fusion_flags(curve)

    scene = sub.add_parser("make-scene", help="write a seeded synthetic scene as PGM bands")
    _add_common(scene)
    scene.add_argument("--seed", type=int, default=0)
    scene.add_argument("--size", type=int, default=256)
    scene.add_argument("--bands", type=int, default=4)
    scene.add_argument("--ratio", type=int, default=settings.DEFAULT_RATIO)
    scene.add_argument("--depth", type=int, choices=(8, 16), default=16)
    scene.add_argument("--out", required=True, help="scene directory")

    check = sub.add_parser("nsct-selftest", help="decompose and rebuild a random image, report the error")
    _add_common(check)
    check.add_argument("--levels", type=int, help=f"pyramid levels (default {settings.NSCT_LEVELS})")
    check.add_argument("--dirs", type=_csv_ints, help="directions per level, e.g. 4,8,8")
    check.add_argument("--boundary", choices=[b.value for b in BoundaryMode], default=settings.NSCT_BOUNDARY)
    check.add_argument("--size", type=int, default=64)
    check.add_argument("--seed", type=int, default=0)
    return parser


def _put(target: dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    node = target
    for key in parents:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
    node[leaf] = value


def _base_config(args: argparse.Namespace) -> dict[str, Any]:
    return load_json_file(args.config) if args.config else {}


def _apply_fusion_flags(raw: dict[str, Any], args: argparse.Namespace) -> None:
    _put(raw, "fusion.a", args.a)
    _put(raw, "fusion.weights", args.weights)
    _put(raw, "fusion.a_grid_step", args.grid_step)
    _put(raw, "fusion.nsct.levels", args.levels)
    if args.dirs is not None:
        _put(raw, "fusion.nsct.directions_per_level", args.dirs)
        _put(raw, "fusion.nsct.levels", args.levels or len(args.dirs))
    elif args.levels is not None:
        raw["fusion"]["nsct"].pop("directions_per_level", None)
    _put(raw, "fusion.nsct.boundary", args.boundary)
    _put(raw, "expand_kernel", args.kernel)
    _put(raw, "depth", args.depth)
    _put(raw, "qnr.window", args.qnr_window)


def _resolve_experiment(args: argparse.Namespace, methods: Optional[list[str]]) -> ExperimentSpec:
    raw = _base_config(args)
    _apply_fusion_flags(raw, args)
    _put(raw, "methods", methods)
    _put(raw, "ratio", args.ratio)
    _put(raw, "output_dir", args.out)
    _put(raw, "q4_block", args.q4_block)
    _put(raw, "histogram_bins", args.bins)
    _put(raw, "histogram_band", args.histogram_band)
    if args.manifest is not None:
        raw["manifest"] = args.manifest
        raw.pop("scene", None)
    elif raw.get("manifest") is None:
        scene = raw.get("scene") or {}
        _put(scene, "seed", args.seed)
        _put(scene, "size", args.size)
        _put(scene, "bands", args.bands)
        raw["scene"] = scene
    return ExperimentSpec.model_validate(raw)


def cmd_protocol(args: argparse.Namespace) -> int:
    spec = _resolve_experiment(args, args.methods)
    report, run_dir = run_protocol(spec, args.threads)
    _emit(
        {
            "status": "ok",
            "command": "protocol",
            "config": spec.model_dump(mode="json"),
            "run_id": report.run_id,
            "run_dir": str(run_dir),
            "methods": [r.method for r in report.reports],
            "errors": report.errors,
        }
    )
    return 0


def cmd_qnr_curve(args: argparse.Namespace) -> int:
    spec = _resolve_experiment(args, [args.method] if args.method else None)
    curve, run_dir = qnr_curve(spec, args.threads)
    _emit(
        {
            "status": "ok",
            "command": "qnr-curve",
            "config": spec.model_dump(mode="json"),
            "method": curve.method.value,
            "selected_a": curve.selected_a,
            "points": len(curve.points),
            "run_dir": str(run_dir),
        }
    )
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    raw = _base_config(args)
    _apply_fusion_flags(raw, args)
    method = args.method or raw.pop("method", None)
    manifest = args.manifest or raw.get("manifest")
    if method is None or manifest is None:
        raise CliUsageError("fuse needs --method and --manifest (flags or config)")
    inputs = load_inputs(manifest)
    if inputs.pan is None:
        raise RasterError(f"manifest {manifest} has no PAN band")
    raw.pop("scene", None)
    raw.update({"manifest": manifest, "methods": [method], "ratio": inputs.ratio})
    _put(raw, "output_dir", args.out)
    spec = ExperimentSpec.model_validate(raw)

    ms_expanded = expand_multiband(inputs.ms, inputs.ratio, spec.expand_kernel)
    result = run_method(
        Method(method), inputs.pan, inputs.ms, ms_expanded, spec.fusion, spec.qnr, max_workers=args.threads
    )
    reference = load_multiband(args.reference) if args.reference else None
    report = full_report(result.fused, reference, inputs.ms, inputs.pan, spec.qnr, method, spec.q4_block)
    report.selected_a = result.selected_a
    report.weights = list(result.config_used.weights) if result.config_used.weights else None
    report.notes = list(result.notes)

    out = Path(spec.output_dir)
    save_multiband(result.fused, out, spec.depth, ratio=1)
    payload = {
        "config": spec.model_dump(mode="json"),
        "report": report.model_dump(mode="json"),
        "qnr_curve": [list(p) for p in result.qnr_curve],
        "weight_fit": asdict(result.weight_fit) if result.weight_fit else None,
    }
    write_json(out / "report.json", payload)
    _emit({"status": "ok", "command": "fuse", "out": str(out), **payload})
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    raw = _base_config(args)
    fused = load_multiband(args.fused)
    reference = load_multiband(args.reference)
    ratio = args.ratio or raw.get("ratio") or settings.DEFAULT_RATIO
    q4_block = args.q4_block or raw.get("q4_block")
    payload: dict[str, Any] = {"fused": args.fused, "reference": args.reference, "ratio": ratio}
    if args.inputs:
        inputs = load_inputs(args.inputs)
        if inputs.pan is None:
            raise RasterError(f"manifest {args.inputs} has no PAN band")
        qnr_raw = raw.get("qnr") or {}
        _put(qnr_raw, "window", args.qnr_window)
        qnr_config = QnrConfig.model_validate({**qnr_raw, "ratio": inputs.ratio})
        report = full_report(fused, reference, inputs.ms, inputs.pan, qnr_config, "", q4_block)
        payload.update(ratio=inputs.ratio, report=report.model_dump(mode="json"))
    else:
        payload["report"] = to_jsonable(asdict(reference_scores(fused, reference, ratio, q4_block)))
    if args.out:
        write_json(args.out, payload)
    _emit({"status": "ok", "command": "metrics", **payload})
    return 0


def cmd_make_scene(args: argparse.Namespace) -> int:
    scene = make_scene(args.seed, args.size, args.bands, args.ratio)
    out = Path(args.out)
    manifest = save_multiband(scene.ms, out, args.depth, ratio=scene.ratio, pan=scene.pan)
    reference = save_multiband(scene.reference, out / "reference", args.depth, ratio=1)
    _emit(
        {
            "status": "ok",
            "command": "make-scene",
            "config": scene.config.model_dump(mode="json"),
            "manifest": str(manifest),
            "reference": str(reference),
        }
    )
    return 0


def cmd_nsct_selftest(args: argparse.Namespace) -> int:
    if args.dirs is not None and args.levels is not None and len(args.dirs) != args.levels:
        raise CliUsageError(f"--dirs names {len(args.dirs)} levels but --levels is {args.levels}")
    if args.dirs is not None:
        levels, directions = len(args.dirs), args.dirs
    else:
        levels = args.levels if args.levels is not None else settings.NSCT_LEVELS
        directions = [8] * levels
    config = NsctConfig(levels=levels, directions_per_level=directions, boundary=args.boundary)
    error = selftest(config, args.size, args.seed)
    passed = error <= settings.RECONSTRUCTION_TOLERANCE
    _emit(
        {
            "status": "ok" if passed else "failed",
            "command": "nsct-selftest",
            "config": config.model_dump(mode="json"),
            "size": args.size,
            "seed": args.seed,
            "max_abs_error": error,
            "tolerance": settings.RECONSTRUCTION_TOLERANCE,
        }
    )
    return 0 if passed else 1


COMMANDS = {
    "fuse": cmd_fuse,
    "metrics": cmd_metrics,
    "protocol": cmd_protocol,
    "qnr-curve": cmd_qnr_curve,
    "make-scene": cmd_make_scene,
    "nsct-selftest": cmd_nsct_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliUsageError as exc:
        CLI_FAILURES.labels(command=args.command).inc()
        _emit_error("UsageError", str(exc))
        return 2
    except DOMAIN_ERRORS as exc:
        CLI_FAILURES.labels(command=args.command).inc()
        logger.error_structured("command_failed", command=args.command, error=type(exc).__name__)
        _emit_error(type(exc).__name__, _one_line(exc))
        return 1
    finally:
        if settings.METRICS_TEXTFILE:
            export_textfile(settings.METRICS_TEXTFILE)


if __name__ == "__main__":
    raise SystemExit(main())
