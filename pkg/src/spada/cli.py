"""spada: the user command line.

Exit codes: 0 ok, 2 invalid usage or unreadable config, 3 server-side
error, 4 timed out waiting for results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from .config import ConfigError, load_user_config
from .rpc import RpcError, RpcTransportError
from .sdk import AwaitReport, SdkError, User

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SERVER = 3
EXIT_TIMEOUT = 4


def _emit(args, payload: Any, human: str) -> None:
    if args.json:
        json.dump(payload, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")
    else:
        print(human)


def _read_file(path: str, what: str) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc


def cmd_submit(user: User, args) -> int:
    body = _read_file(args.payload, "payload")
    parameters = None
    if args.params:
        try:
            parameters = user.parameters(json.loads(_read_file(args.params, "params")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"params file is not valid JSON: {exc}") from exc
    clients = [c for c in args.clients.split(",") if c]
    if not clients:
        raise ConfigError("--clients needs at least one client id")
    payload = user.payload(body, name=args.name)
    tasks = [user.task(c, payload, parameters) for c in clients]
    assignment = user.assignment(args.name, tasks).commit()
    _emit(
        args,
        {
            "assignment_id": assignment.id,
            "task_ids": [t.id for t in tasks],
        },
        "assignment {}\n{}".format(
            assignment.id,
            "\n".join(f"  task {t.id} -> {t.content['client_id']}" for t in tasks),
        ),
    )
    return EXIT_OK


def cmd_clients(user: User, args) -> int:
    rows = user.get_clients(online_only=args.online)
    lines = [
        "{:<24} {:>7} {}".format(
            r["client_id"], "online" if r["online"] else "offline", r["last_seen"] or "-"
        )
        for r in rows
    ]
    _emit(args, rows, "\n".join(lines) if lines else "(no clients)")
    return EXIT_OK


def cmd_cancel(user: User, args) -> int:
    out = user.cancel(args.task_id)
    _emit(args, out, f"task {out['task_id']} -> {out['status']}")
    return EXIT_OK


def _print_report(args, report: AwaitReport) -> None:
    if args.json:
        payload = {
            "timed_out": report.timed_out,
            "tasks": {
                tid: {
                    "status": t.status,
                    "results": t.results,
                    "error_log": t.error_log,
                }
                for tid, t in report.tasks.items()
            },
        }
        _emit(args, payload, "")
        return
    for tid, task in sorted(report.tasks.items()):
        print(f"task {tid}: {task.status}")
        for i, value in enumerate(task.results):
            print(f"  [{i}] {json.dumps(value, sort_keys=True)}")
        if task.error_log:
            first = task.error_log.strip().splitlines()
            print(f"  error: {first[0] if first else ''}")
    if report.timed_out:
        print("(timed out; partial view)")


def cmd_results(user: User, args) -> int:
    if args.follow:
        for event in user.stream_assignment(args.assignment_id):
            if args.json:
                _emit(args, event, "")
            elif event["kind"] == "result":
                print(
                    "result {} #{} {}".format(
                        event["task_id"],
                        event["seq"],
                        json.dumps(event["value"], sort_keys=True),
                    )
                )
            else:
                print(f"status {event['task_id']} -> {event['status']}")
        return EXIT_OK
    report = user.await_assignment(args.assignment_id, timeout=args.timeout)
    _print_report(args, report)
    return EXIT_TIMEOUT if report.timed_out else EXIT_OK


def cmd_bench(user: User, args) -> int:
    # Self-contained: spins its own loopback deployment so timings are
    # not polluted by whatever the configured stack is doing.
    from .sim.bench import format_report, run_latency_bench

    report = run_latency_bench(n=args.n, deployment=args.deployment)
    if args.json:
        _emit(args, report.to_json(), "")
    else:
        print(format_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spada", description="Submit and track tasks on edge clients."
    )
    parser.add_argument(
        "-c", "--config", help="user config path (or set SPADA_CONFIG)"
    )
    parser.add_argument(
        "--json", action="store_true", help="machine-readable output"
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("submit", help="commit a payload as tasks on clients")
    p.add_argument("--payload", required=True, help="payload source file")
    p.add_argument("--params", help="JSON file with the parameters document")
    p.add_argument("--clients", required=True, help="comma-separated client ids")
    p.add_argument("--name", default="job", help="assignment name")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("clients", help="list registered clients")
    p.add_argument("--online", action="store_true", help="only clients seen recently")
    p.set_defaults(func=cmd_clients)

    p = sub.add_parser("cancel", help="cancel an active task")
    p.add_argument("task_id")
    p.set_defaults(func=cmd_cancel)

    p = sub.add_parser("results", help="await or follow an assignment's results")
    p.add_argument("assignment_id")
    p.add_argument("--follow", action="store_true", help="stream events as they come")
    p.add_argument("--timeout", type=float, help="give up after this many seconds")
    p.set_defaults(func=cmd_results)

    p = sub.add_parser("bench", help="run the latency experiment on loopback")
    p.add_argument("--n", type=int, default=100, help="iterations")
    p.add_argument(
        "--deployment",
        choices=["loopback", "simulated"],
        default="loopback",
        help="real sockets, or the deterministic virtual-time deployment",
    )
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    needs_server = args.func is not cmd_bench
    try:
        user = User.from_config(args.config) if needs_server else None
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(user, args)
    except (ConfigError, SdkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RpcError as exc:
        print(f"server error: {exc.code}: {exc.msg}", file=sys.stderr)
        return EXIT_SERVER
    except RpcTransportError as exc:
        print(f"server unreachable: {exc}", file=sys.stderr)
        return EXIT_SERVER
    finally:
        if user is not None:
            user.close()


if __name__ == "__main__":
    sys.exit(main())
