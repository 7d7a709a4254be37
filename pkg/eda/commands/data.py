import argparse

import numpy as np
from pydis_core.utils.logging import get_logger

from eda.anchors import fit_anchor_sets
from eda.constants import Files
from eda.data import GenConfig, generate_dataset, load_scenes, save_anchors, save_scenes
from eda.data.generation import mode_histogram
from eda.pipeline import split_scenes
from eda.utils.config_files import load_config

log = get_logger(__name__)


def gen_data(args: argparse.Namespace) -> None:
    """Generate scenes from a config file and print the maneuver histogram."""
    cfg = load_config(GenConfig, args.config)
    scenes = generate_dataset(cfg)
    save_scenes(args.out, scenes)

    print(f"Wrote {len(scenes)} scenes to {args.out}")
    for name, count in mode_histogram(scenes, cfg).items():
        print(f"  {name:<14} {count}")


def make_anchors(args: argparse.Namespace) -> None:
    """Fit anchors per category to the endpoints of the training split."""
    train, _ = split_scenes(load_scenes(args.data))
    endpoints = np.stack([scene.gt_trajectory.endpoint for scene in train])
    fitted = fit_anchor_sets(endpoints, [scene.category for scene in train], args.k, args.seed)
    save_anchors(args.out, {category: anchor_set for category, (anchor_set, _) in fitted.items()})

    print(f"Wrote {args.k} anchors per category for {len(fitted)} categories to {args.out}")
    for category, (_, result) in fitted.items():
        state = "converged" if result.converged else "stopped"
        print(f"  category {category}: objective {result.objective:.6f} ({state} after {result.iterations} iterations)")


def register(subparsers: argparse._SubParsersAction) -> None:
    """Add the data commands to the command-line parser."""
    parser = subparsers.add_parser("gen-data", help="Generate a synthetic scene file.")
    parser.add_argument("--config", help="key=value file of generator settings")
    parser.add_argument("--out", default=Files.scenes)
    parser.set_defaults(func=gen_data)

    parser = subparsers.add_parser("make-anchors", help="Fit intention points to training endpoints with k-means.")
    parser.add_argument("--data", default=Files.scenes)
    parser.add_argument("--k", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=Files.anchors)
    parser.set_defaults(func=make_anchors)
