"""Command-line entry point: `marlreplay run ...` and `marlreplay sweep ...`."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .nn import ConfigError
from .runner import (EXIT_OK, EXIT_USAGE, METHODS, format_table, parse_value, read_config, run,
                     spec_from_mapping, sweep)

# flag name -> RunSpec field
FLAGS = {
    "scenario": str, "method": str, "model": str, "seed": int, "episodes": int, "out": str,
    "capacity": int, "eval_every": int, "eval_episodes": int, "epsilon_end": float,
    "clip_lo": float, "clip_hi": float, "probe_at": int,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    for name, typ in FLAGS.items():
        if name not in skip:
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra setting such as env.cd_max=3 or train.reward_scale=0.05")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marlreplay", description="Independent Q-learning with replay stabilisation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_common(sub.add_parser("run", help="train one configuration"))
    sw = sub.add_parser("sweep", help="train several methods and seeds, then aggregate")
    _add_common(sw, skip=("method", "seed", "out"))
    sw.add_argument("--methods", default="noxp,xp,xp+fp")
    sw.add_argument("--seeds", default="0-4", help="comma list or inclusive range a-b")
    sw.add_argument("--out", required=True, help="sweep directory")
    sw.add_argument("--parallelism", type=int, default=1)
    return parser


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _merged(args: argparse.Namespace) -> dict:
    values = read_config(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in ("env", "train"):
                raise ConfigError(f"unknown group {group!r}")
            values.setdefault(group, {})[sub] = parse_value(value)
        else:
            values[key] = parse_value(value)
    for name in FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return values


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = _merged(args)
        if args.command == "run":
            specs = [spec_from_mapping(values)]
        else:
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            for m in methods:
                if m not in METHODS:
                    raise ConfigError(f"unknown method {m!r}")
            specs = [spec_from_mapping(dict(values, method=m, seed=s,
                                             out=str(Path(args.out) / f"{m.replace('+', '-')}_s{s}")))
                     for m in methods for s in parse_seeds(args.seeds)]
    except (ConfigError, TypeError, ValueError) as exc:
        # TypeError/ValueError come from mistyped config values
        print(f"marlreplay: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "run":
        result = run(specs[0])
        print(f"{result.status}: {specs[0].out}")
        if result.oracle is not None:
            print(f"oracle sup-norm distance: {result.oracle['sup_norm']:.4f}")
        return result.exit_code
    summaries = sweep(specs, args.parallelism, args.out)
    if summaries:
        print(format_table(summaries))
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
