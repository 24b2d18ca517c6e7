"""spada-agent: run one edge agent from a config file."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from ..config import ConfigError, load_agent_config
from .runtime import AgentService


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spada-agent",
        description="Edge agent: syncs tasks with the server and runs payloads.",
    )
    parser.add_argument(
        "-c",
        "--config",
        help="path to the agent config file (or set SPADA_CONFIG)",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug-level logging"
    )
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_agent_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    service = AgentService(config)

    def request_stop(signum, frame) -> None:
        logging.getLogger("spada.agent").info(
            "signal %s: shutting down", signal.Signals(signum).name
        )
        # stop() joins worker threads; keep it off the signal frame.
        threading.Thread(target=service.stop, daemon=True).start()

    signal.signal(signal.SIGTERM, request_stop)
    signal.signal(signal.SIGINT, request_stop)
    service.start()
    service.done.wait()
    return service.exit_code


if __name__ == "__main__":
    sys.exit(main())
