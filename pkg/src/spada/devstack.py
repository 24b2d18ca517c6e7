"""A complete deployment on loopback, in one process.

Used three ways: programmatically by tests and the latency bench, as
the ``spada-stack`` command for interactive experimentation, and as the
reference for how the pieces wire together.  Agent data directories,
config files and (optionally) the store live under one root directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import signal
import sys
import threading
from pathlib import Path

from .bus import BusServer, InProcessBus
from .config import AgentConfig, SandboxConfig, UserConfig
from .agent.runtime import AgentService
from .gateway import GatewayServer
from .rpc import RpcServer
from .server import ROLE_CLIENT, ROLE_USER, ServerNode, TokenRegistry
from .store import FileStore, MemoryStore
from .sdk import User


class DevStack:
    def __init__(
        self,
        root: str | Path,
        *,
        n_agents: int = 1,
        client_ids: list[str] | None = None,
        persist: bool = False,
        host: str = "127.0.0.1",
        server_port: int = 0,
        bus_port: int = 0,
        gateway_port: int | None = None,
        client_token: str | None = None,
        user_token: str | None = None,
        fsync: bool = False,
        signal_trace: bool = False,
        online_window_s: float = 30.0,
        agent_overrides: dict | None = None,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.client_token = client_token or secrets.token_hex(16)
        self.user_token = user_token or secrets.token_hex(16)
        if persist:
            self.store = FileStore(self.root / "store", online_window_s=online_window_s)
        else:
            self.store = MemoryStore(online_window_s=online_window_s)
        self.bus = InProcessBus()
        self.node = ServerNode(
            self.store,
            self.bus,
            TokenRegistry(
                {self.client_token: ROLE_CLIENT, self.user_token: ROLE_USER}
            ),
        )
        self.rpc = RpcServer(self.node, host=host, port=server_port)
        self.bus_server = BusServer(self.bus, host=host, port=bus_port)
        self.gateway = (
            None
            if gateway_port is None
            else GatewayServer(self.node, host=host, port=gateway_port)
        )
        self.client_ids = client_ids or [f"dev-{i}" for i in range(n_agents)]
        overrides = agent_overrides or {}
        self.agents: list[AgentService] = []
        for client_id in self.client_ids:
            config = AgentConfig(
                client_id=client_id,
                server_addr=self.rpc.addr,
                bus_addr=self.bus_server.addr,
                token=self.client_token,
                data_dir=str(self.root / f"agent-{client_id}"),
                sandbox=SandboxConfig(
                    grace_seconds=overrides.get("grace_seconds", 2.0)
                ),
                retry_base_s=overrides.get("retry_base_s", 0.2),
                retry_cap_s=overrides.get("retry_cap_s", 5.0),
                refetch_interval_s=overrides.get("refetch_interval_s", 10.0),
            )
            self.agents.append(
                AgentService(config, fsync=fsync, signal_trace=signal_trace)
            )
        self._write_configs()

    def _write_configs(self) -> None:
        """Drop config files so external CLIs can talk to this stack."""
        user_cfg = {
            "server_addr": self.rpc.addr,
            "bus_addr": self.bus_server.addr,
            "token": self.user_token,
        }
        (self.root / "user.json").write_text(json.dumps(user_cfg, indent=2), "utf-8")
        for agent in self.agents:
            cfg = agent.config
            raw = {
                "client_id": cfg.client_id,
                "server_addr": cfg.server_addr,
                "bus_addr": cfg.bus_addr,
                "token": cfg.token,
                "data_dir": cfg.data_dir,
                "sandbox": {"grace_seconds": cfg.sandbox.grace_seconds},
            }
            path = self.root / f"agent-{cfg.client_id}.json"
            path.write_text(json.dumps(raw, indent=2), "utf-8")

    def start(self) -> "DevStack":
        for agent in self.agents:
            agent.start()
        return self

    def user_config(self) -> UserConfig:
        return UserConfig(
            server_addr=self.rpc.addr,
            bus_addr=self.bus_server.addr,
            token=self.user_token,
        )

    def user(self) -> User:
        return User(self.user_config())

    def close(self) -> None:
        for agent in self.agents:
            agent.stop()
        if self.gateway is not None:
            self.gateway.close()
        self.rpc.close()
        self.bus_server.close()
        if isinstance(self.store, FileStore):
            self.store.close()

    def __enter__(self) -> "DevStack":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spada-stack",
        description="Run a complete local deployment: server, bus and agents.",
    )
    parser.add_argument("--data", default="./spada-stack", help="root data directory")
    parser.add_argument("--agents", type=int, default=1, help="number of agents")
    parser.add_argument("--server-port", type=int, default=7420)
    parser.add_argument("--bus-port", type=int, default=7421)
    parser.add_argument("--gateway-port", type=int, default=7422)
    parser.add_argument(
        "--ephemeral", action="store_true", help="in-memory store, random ports"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    stack = DevStack(
        args.data,
        n_agents=args.agents,
        persist=not args.ephemeral,
        server_port=0 if args.ephemeral else args.server_port,
        bus_port=0 if args.ephemeral else args.bus_port,
        gateway_port=0 if args.ephemeral else args.gateway_port,
        fsync=not args.ephemeral,
    )
    stack.start()
    print(f"server: {stack.rpc.addr}")
    print(f"bus:    {stack.bus_server.addr}")
    print(f"http:   {stack.gateway.url}")
    print(f"agents: {', '.join(stack.client_ids)}")
    print(f"user config: {stack.root / 'user.json'}")
    print("ready (ctrl-c to stop)")
    done = threading.Event()

    def request_stop(signum, frame) -> None:
        done.set()

    signal.signal(signal.SIGINT, request_stop)
    signal.signal(signal.SIGTERM, request_stop)
    done.wait()
    print("shutting down")
    stack.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
