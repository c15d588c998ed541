import argparse

from commands.generic import add_common, pipeline_context, render
from schemas import DatasetSource, parse_config


def _override(cfg, args: argparse.Namespace):
    raw = cfg.model_dump(mode="json")
    if args.data is not None:
        raw["dataset"].update(source=DatasetSource.FOLDER.value, path=str(args.data))
    if args.r is not None:
        raw["key"]["r"] = args.r
    if args.c is not None:
        raw["key"]["c"] = args.c
    if args.epochs is not None:
        raw["codec"]["epochs"] = args.epochs
    return parse_config(raw)


@render
def train_codec(args: argparse.Namespace):
    from pipeline import cmd_train_codec

    cfg, run = pipeline_context(args)
    return cmd_train_codec(_override(cfg, args), run)


def register(subparsers) -> None:
    p = subparsers.add_parser("train-codec", help="Train the steganographic key codec")
    add_common(p)
    p.add_argument("--data", default=None, help="Image-folder dataset root (overrides dataset.*)")
    p.add_argument("--r", type=int, default=None, help="Key block size")
    p.add_argument("--c", type=int, default=None, help="Key channels")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(handler=train_codec)
