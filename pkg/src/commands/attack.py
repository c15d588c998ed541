import argparse

from commands.generic import add_common, pipeline_context, render

KINDS = ("finetune", "prune", "transfer", "reverse")


@render
def attack(args: argparse.Namespace):
    from pipeline import cmd_attack

    cfg, run = pipeline_context(args)
    return cmd_attack(
        cfg,
        run,
        args.kind,
        args.user,
        target=args.target,
        strategies=args.strategy,
        assumption=args.assumption,
        plot=args.plot,
    )


def register(subparsers) -> None:
    p = subparsers.add_parser("attack", help="Run a robustness attack against a protected model")
    add_common(p)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--target", choices=("protected", "simple"), default="protected")
    p.add_argument("--strategy", action="append", default=None, help="FTAL, FTLL, RTAL or RTLL; repeatable")
    p.add_argument("--assumption", type=int, choices=(1, 2), default=1, help="Reverse-engineering attacker knowledge")
    p.add_argument("--plot", action="store_true", help="Write pruning curves as PNG")
    p.set_defaults(handler=attack)
