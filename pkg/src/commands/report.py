import argparse

from commands.generic import add_common, pipeline_context, render


@render
def report(args: argparse.Namespace):
    from pipeline import cmd_report

    if args.run is not None:
        return cmd_report(args.run)
    _, run = pipeline_context(args)
    return cmd_report(run.path)


def register(subparsers) -> None:
    p = subparsers.add_parser("report", help="Summarize a run directory")
    add_common(p)
    p.add_argument("--run", default=None, help="Run directory (default: <out>/<config name>)")
    p.set_defaults(handler=report)
