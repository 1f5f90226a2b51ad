from __future__ import annotations

from prometheus_client import REGISTRY, Counter, Histogram, write_to_textfile

FUSIONS_TOTAL = Counter(
    "pansharp_fusions_total",
    "Total fusion runs",
    ["method"],
)

FUSION_DURATION = Histogram(
    "pansharp_fusion_duration_seconds",
    "Fusion latency in seconds, grid search included",
    ["method"],
    buckets=(0.01, 0.05, 0.1, 0.5, 1, 5, 10, 30, 60, 300),
)

GRID_EVALUATIONS = Counter(
    "pansharp_grid_evaluations_total",
    "Candidate exponents evaluated during QNR grid search",
    ["method"],
)

NSCT_TRANSFORMS = Counter(
    "pansharp_nsct_transforms_total",
    "NSCT transforms computed",
    ["direction"],
)

CLI_FAILURES = Counter(
    "pansharp_cli_failures_total",
    "Commands that exited with an error",
    ["command"],
)


def export_textfile(path: str) -> None:
    """Dump the process registry for the node-exporter textfile collector."""
    write_to_textfile(path, REGISTRY)
