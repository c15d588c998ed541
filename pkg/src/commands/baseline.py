import argparse

from commands.generic import add_common, pipeline_context, render


@render
def train_baseline(args: argparse.Namespace):
    from pipeline import cmd_train_baseline

    cfg, run = pipeline_context(args)
    return cmd_train_baseline(cfg, run)


def register(subparsers) -> None:
    p = subparsers.add_parser("train-baseline", help="Train the unprotected classifier")
    add_common(p)
    p.set_defaults(handler=train_baseline)
