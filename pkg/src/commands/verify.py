import argparse

from commands.generic import add_common, pipeline_context, render

INNOCENT = "innocent"


@render
def verify(args: argparse.Namespace):
    from pipeline import cmd_verify

    cfg, run = pipeline_context(args)
    truths = None
    if args.truth:
        truths = [None if t == INNOCENT else t for t in args.truth]
    return cmd_verify(cfg, run, args.suspect, truths)


@render
def trace(args: argparse.Namespace):
    from pipeline import cmd_trace

    cfg, run = pipeline_context(args)
    return cmd_trace(cfg, run, args.images)


def register(subparsers) -> None:
    p = subparsers.add_parser("verify", help="Black-box ownership verification of suspect models")
    add_common(p)
    p.add_argument(
        "--suspect",
        action="append",
        required=True,
        help="Checkpoint path, http(s):// URL, or cmd:<command line>; repeatable",
    )
    p.add_argument(
        "--truth",
        action="append",
        default=None,
        help=f"Ground truth per suspect: a user id or '{INNOCENT}'; enables tracing accuracy",
    )
    p.set_defaults(handler=verify)

    t = subparsers.add_parser("trace", help="Trace intercepted images back to a registered key")
    add_common(t)
    t.add_argument("--images", required=True, help="Directory of images or .npz with an 'images' array")
    t.set_defaults(handler=trace)
