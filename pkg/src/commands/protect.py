import argparse

from commands.generic import add_common, pipeline_context, render


def _users(value: str):
    return [u.strip() for u in value.split(",") if u.strip()]


@render
def protect(args: argparse.Namespace):
    from pipeline import cmd_protect

    cfg, run = pipeline_context(args)
    return cmd_protect(cfg, args.users, run)


def register(subparsers) -> None:
    p = subparsers.add_parser("protect", help="Generate one protected model per user")
    add_common(p)
    p.add_argument("--users", type=_users, default=None, help="Comma-separated user ids (default: config users)")
    p.set_defaults(handler=protect)
