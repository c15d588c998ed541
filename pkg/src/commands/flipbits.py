import argparse

from commands.generic import add_common, pipeline_context, render


@render
def flipbits(args: argparse.Namespace):
    from pipeline import cmd_flipbits

    cfg, run = pipeline_context(args)
    return cmd_flipbits(cfg, run, args.user, args.max_flips, args.trials)


def register(subparsers) -> None:
    p = subparsers.add_parser("flipbits", help="Accuracy under keys with flipped bits")
    add_common(p)
    p.add_argument("--user", required=True)
    p.add_argument("--max-flips", dest="max_flips", type=int, default=24)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(handler=flipbits)
