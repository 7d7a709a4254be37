import argparse
import itertools
from pathlib import Path

from pydis_core.utils.logging import get_logger

from eda.anchors import EvolveSchedule
from eda.assignment import Paradigm
from eda.constants import Files
from eda.data import Checkpoint, load_anchors, load_scenes, save_checkpoint
from eda.loss import ClsKind
from eda.pipeline import split_scenes
from eda.training import DEFAULT_EVOLVE_LAYERS, TrainConfig, train_model
from eda.utils.config_files import load_config
from eda.utils.files import write_csv

log = get_logger(__name__)


def _flag_overrides(args: argparse.Namespace) -> dict[str, object]:
    """Settings given on the command line, except the evolve layers; they take precedence over the config file."""
    overrides: dict[str, object] = {}
    if args.paradigm is not None:
        overrides["paradigm"] = args.paradigm
    if args.distinct is not None:
        overrides["distinct"] = args.distinct == "on"
    if args.cls is not None:
        overrides["cls_kind"] = args.cls
    for name in ("epochs", "lr", "seed"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    return overrides


def _train_config(args: argparse.Namespace) -> TrainConfig:
    overrides = _flag_overrides(args)
    cfg = load_config(TrainConfig, args.config, **overrides)
    if args.evolve_layers is None:
        return cfg
    # The schedule is checked against the decoder depth the rest of the settings resolve to.
    schedule = EvolveSchedule.parse(args.evolve_layers, cfg.num_layers)
    return load_config(TrainConfig, args.config, **overrides, evolve_layers=schedule.evolve_after_layers)


def _log_columns(num_layers: int) -> tuple[str, ...]:
    per_layer = (f"{part}_l{layer}" for layer in range(1, num_layers + 1) for part in ("reg", "cls"))
    return ("epoch", "total", "reg", "cls", "lr", *per_layer)


def train(args: argparse.Namespace) -> None:
    """Train one model on the training split and write the checkpoint and loss log."""
    cfg = _train_config(args)
    train_scenes, _ = split_scenes(load_scenes(args.data))
    anchor_sets = load_anchors(args.anchors)
    log.info(
        f"Training paradigm {cfg.paradigm} (evolve after [{cfg.schedule()}], "
        f"distinct {'on' if cfg.use_distinct else 'off'}, {cfg.cls_kind}) on {len(train_scenes)} scenes"
    )

    result = train_model(train_scenes, anchor_sets, cfg)
    save_checkpoint(args.out, Checkpoint(result.params, cfg.metadata()))

    log_path = args.log or Path(args.out).with_name(Files.train_log)
    write_csv(
        log_path,
        _log_columns(cfg.num_layers),
        (
            (record.epoch, record.total, record.reg, record.cls, record.lr, *itertools.chain(*record.per_layer))
            for record in result.history
        ),
    )
    print(f"Wrote checkpoint to {args.out} and the training log to {log_path}")


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add the `train` command to the command-line parser."""
    default_layers = ",".join(str(layer) for layer in DEFAULT_EVOLVE_LAYERS)

    parser = subparsers.add_parser("train", help="Train a model under one label-assignment paradigm.")
    parser.add_argument("--data", default=Files.scenes)
    parser.add_argument("--anchors", default=Files.anchors)
    parser.add_argument("--paradigm", type=Paradigm, choices=list(Paradigm), help="default eda")
    parser.add_argument(
        "--evolve-layers", help=f'comma separated layers after which anchors evolve (eda default "{default_layers}")'
    )
    parser.add_argument("--distinct", choices=("on", "off"), help="distinct anchor selection (eda default on)")
    parser.add_argument("--cls", type=ClsKind, choices=list(ClsKind), help="default bce")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--config", help="key=value file of further training settings")
    parser.add_argument("--out", default=Files.model)
    parser.add_argument("--log", help=f"training log path (default: {Files.train_log} next to the checkpoint)")
    parser.set_defaults(func=train)
