import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from pydis_core.utils.logging import get_logger  # noqa: E402

from eda.constants import Files  # noqa: E402
from eda.data import load_anchors, load_checkpoint, load_scenes  # noqa: E402
from eda.data.records import (  # noqa: E402
    load_layer_metrics,
    load_metrics,
    save_layer_metrics,
    save_metrics,
)
from eda.geometry import LengthMeasure  # noqa: E402
from eda.metrics import DEFAULT_K, DEFAULT_MISS_THRESHOLD, LayerMetrics, MetricsRow, ScoreMap, ScoreMode  # noqa: E402
from eda.pipeline import AblationMatrix, evaluate_model, run_ablation, split_scenes  # noqa: E402
from eda.utils.config_files import load_config  # noqa: E402
from eda.utils.exceptions import SchemaMismatchError  # noqa: E402
from eda.utils.files import write_csv  # noqa: E402

log = get_logger(__name__)

RUNS_HEADER = (
    "config_id", "seed", "min_ade", "min_fde", "miss_rate", "map_original", "map_scaled", "map_rank", "endpoint_spread"
)
# Fixed salt so repeated reports produce identical SVG ids.
SVG_HASH_SALT = "eda-report"


def _evolve_times(metadata: dict[str, str]) -> int:
    return len([layer for layer in metadata.get("evolve_layers", "").split(",") if layer])


def _checkpoint_config_id(metadata: dict[str, str]) -> str:
    paradigm, distinct, cls_kind = (metadata.get(key, "?") for key in ("paradigm", "distinct", "cls_kind"))
    return f"{paradigm}-evolve{_evolve_times(metadata)}-{distinct}-{cls_kind}"


def eval_command(args: argparse.Namespace) -> None:
    """Evaluate a checkpoint on the held-out split."""
    checkpoint = load_checkpoint(args.model)
    _, held_out = split_scenes(load_scenes(args.data))
    metadata = checkpoint.metadata
    score_map = ScoreMap(metadata.get("score_map", ScoreMap.SIGMOID))
    measure = args.length_measure or LengthMeasure(metadata.get("length_measure", LengthMeasure.ARC))

    bundle, layers = evaluate_model(
        checkpoint.params,
        held_out,
        args.k,
        score_map=score_map,
        miss_threshold=args.miss_threshold,
        length_measure=measure,
    )
    config_id = _checkpoint_config_id(metadata)
    row = MetricsRow.from_bundle(
        config_id,
        _evolve_times(metadata),
        metadata.get("distinct") == "on",
        metadata.get("cls_kind", "bce"),
        args.score_mode,
        bundle,
    )
    save_metrics(args.out, [row])
    layers_path = Path(args.out).with_name(Files.layers)
    save_layer_metrics(layers_path, {config_id: layers})

    print(f"{config_id} on {len(held_out)} held-out scenes (K={args.k}, {args.score_mode} scores):")
    print(f"  minADE {bundle.min_ade:.4f}  minFDE {bundle.min_fde:.4f}  miss rate {bundle.miss_rate:.4f}")
    print(f"  mAP original {bundle.map_original:.4f}  scaled {bundle.map_scaled:.4f}  rank {bundle.map_rank:.4f}")
    print(f"  endpoint spread {bundle.endpoint_spread:.4f}")
    for category in bundle.by_category().values():
        print(
            f"  category {category.category} ({category.num_scenes} scenes): minADE {category.min_ade:.4f}  "
            f"minFDE {category.min_fde:.4f}  miss rate {category.miss_rate:.4f}"
        )
    print(f"Wrote {args.out} and {layers_path}")


def ablate(args: argparse.Namespace) -> None:
    """Run the ablation grid and write summary, per-layer and per-run tables."""
    matrix = load_config(AblationMatrix, args.matrix)
    train_scenes, held_out = split_scenes(load_scenes(args.data))
    # An anchor-count axis refits anchors on the training split instead of reading the file.
    anchor_sets = None if matrix.num_anchors else load_anchors(args.anchors)

    report = run_ablation(train_scenes, held_out, anchor_sets, matrix)

    out = Path(args.out)
    save_metrics(out / Files.metrics, report.summary)
    save_layer_metrics(out / Files.layers, report.layers)
    write_csv(
        out / Files.runs,
        RUNS_HEADER,
        (
            (
                run.cell.config_id,
                run.seed,
                run.bundle.min_ade,
                run.bundle.min_fde,
                run.bundle.miss_rate,
                run.bundle.map_original,
                run.bundle.map_scaled,
                run.bundle.map_rank,
                run.bundle.endpoint_spread,
            )
            for run in report.runs
        ),
    )

    print(f"Median over {len(matrix.seeds)} seeds ({matrix.score_mode} scores):")
    for row in report.summary:
        print(f"  {row.config_id:<24} minFDE {row.min_fde:.4f}  miss rate {row.miss_rate:.4f}  mAP {row.map:.4f}")
    print(f"Wrote {Files.metrics}, {Files.layers} and {Files.runs} to {out}")


def _line_chart(path: Path, series: dict[str, list[LayerMetrics]], field: str, ylabel: str) -> None:
    figure, axes = plt.subplots(figsize=(6, 4))
    for config_id, layers in series.items():
        values = [getattr(layer, field) for layer in layers]
        axes.plot([layer.layer for layer in layers], values, marker="o", label=config_id)
    axes.set_xlabel("decoder layer")
    axes.set_ylabel(ylabel)
    axes.grid(True, alpha=0.3)
    axes.legend(fontsize="small")
    figure.tight_layout()
    figure.savefig(path, format="svg", metadata={"Date": None})
    plt.close(figure)


def plot_layers(
    rows: list[MetricsRow], layers: dict[str, list[LayerMetrics]], out: Path
) -> dict[str, list[LayerMetrics]]:
    """Write per-layer minFDE and miss-rate charts with one series per configuration in `rows`."""
    series = {}
    for row in rows:
        if row.config_id not in layers:
            raise SchemaMismatchError(f"No per-layer rows for configuration `{row.config_id}`.")
        series[row.config_id] = layers[row.config_id]

    out.mkdir(parents=True, exist_ok=True)
    save_layer_metrics(out / Files.layers, series)
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        _line_chart(out / "min_fde_by_layer.svg", series, "min_fde", "minFDE")
        _line_chart(out / "miss_rate_by_layer.svg", series, "miss_rate", "miss rate")
    return series


def report(args: argparse.Namespace) -> None:
    """Chart the per-layer metrics of every configuration in a metrics file."""
    metrics_path = Path(args.metrics_in)
    rows = load_metrics(metrics_path)
    layers = load_layer_metrics(metrics_path.with_name(Files.layers))
    series = plot_layers(rows, layers, Path(args.out))
    print(f"Wrote {len(series)} series to {args.out}")


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add the evaluation commands to the command-line parser."""
    parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on the held-out scenes.")
    parser.add_argument("--data", default=Files.scenes)
    parser.add_argument("--model", default=Files.model)
    parser.add_argument("--k", type=int, default=DEFAULT_K)
    parser.add_argument("--score-mode", type=ScoreMode, choices=list(ScoreMode), default=ScoreMode.ORIGINAL)
    parser.add_argument("--miss-threshold", type=float, default=DEFAULT_MISS_THRESHOLD)
    parser.add_argument(
        "--length-measure",
        type=LengthMeasure,
        choices=list(LengthMeasure),
        help="how the NMS radius measures the top trajectory (default: as trained)",
    )
    parser.add_argument("--out", default=Files.metrics)
    parser.set_defaults(func=eval_command)

    parser = subparsers.add_parser("ablate", help="Train and evaluate the evolve-times x distinct x cls grid.")
    parser.add_argument("--matrix", help="key=value file of grid settings")
    parser.add_argument("--data", default=Files.scenes)
    parser.add_argument("--anchors", default=Files.anchors)
    parser.add_argument("--out", default=".")
    parser.set_defaults(func=ablate)

    parser = subparsers.add_parser("report", help="Chart per-layer minFDE and miss rate.")
    parser.add_argument(
        "--in",
        dest="metrics_in",
        default=Files.metrics,
        help=f"metrics file; {Files.layers} is read from its directory",
    )
    parser.add_argument("--out", default="plots")
    parser.set_defaults(func=report)
