"""Command-line entry points.

``sim`` runs and diffs deterministic scenarios; ``dyadchat`` wraps the same
commands and adds ``serve`` for the network service. Exit codes follow the
sim contract: 0 ok, 1 assertion/diff failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .sim import ScenarioParseError, diff_transcripts, run_scenario

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _sim_parser(prog: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog, description="Deterministic dyad simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, default=None, help="directory for transcript + metrics")

    diff = sub.add_parser("diff", help="structurally compare two transcripts")
    diff.add_argument("left", type=Path)
    diff.add_argument("right", type=Path)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        result = run_scenario(args.scenario, seed=args.seed)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "transcript.jsonl").write_text(result.transcript_text(), encoding="utf-8")
        (args.out / "metrics.json").write_text(
            json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    else:
        sys.stdout.write(result.transcript_text())
    summary = result.metrics
    print(
        f"items created={summary.items_created} transferred={summary.items_transferred} "
        f"delivered={summary.items_delivered} dropped_batches={summary.dropped_batches}",
        file=sys.stderr,
    )
    return EXIT_OK


def _cmd_diff(args: argparse.Namespace) -> int:
    try:
        differences = diff_transcripts(args.left, args.right)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for difference in differences:
        print(difference)
    return EXIT_OK if not differences else EXIT_FAILURE


def sim_main(argv: list[str] | None = None) -> int:
    args = _sim_parser("sim").parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_diff(args)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dyadchat", description="Agent-mediated dyadic chat")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="simulator commands")
    sim.add_argument("rest", nargs=argparse.REMAINDER)

    serve = sub.add_parser("serve", help="run the chat service")
    serve.add_argument("--config", type=Path, default=None, help="JSON config file")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.add_argument("--script", type=Path, default=None, help="scripted gateway rules file")
    serve.add_argument("--base-url", default=None, help="live gateway base URL")
    serve.add_argument("--model", default=None)
    serve.add_argument("--preset-dir", type=Path, default=None)
    serve.add_argument("--transcript-dir", type=Path, default=None)
    serve.add_argument("--time-scale", type=float, default=None)

    args = parser.parse_args(argv)
    if args.command == "sim":
        return sim_main(args.rest)

    from .service import ServiceConfig, serve_forever

    try:
        config = ServiceConfig.load(
            args.config,
            host=args.host,
            port=args.port,
            script=args.script,
            base_url=args.base_url,
            model=args.model,
            preset_dir=args.preset_dir,
            transcript_dir=args.transcript_dir,
            time_scale=args.time_scale,
        )
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    serve_forever(config)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
