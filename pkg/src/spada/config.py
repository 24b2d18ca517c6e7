"""Configuration files for agents and user tooling.

Both are small JSON documents.  The agent config path is normally given
on the command line; the SPADA_CONFIG environment variable overrides it
so supervised deployments can relocate the file without editing unit
definitions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_ENV_VAR = "SPADA_CONFIG"


class ConfigError(ValueError):
    """Unreadable or structurally invalid configuration."""


@dataclass(slots=True)
class SandboxConfig:
    python_cmd: str | None = None
    grace_seconds: float = 5.0

    @classmethod
    def from_raw(cls, raw: dict[str, Any]) -> "SandboxConfig":
        return cls(
            python_cmd=raw.get("python_cmd"),
            grace_seconds=float(raw.get("grace_seconds", 5.0)),
        )


@dataclass(slots=True)
class SignalSourceConfig:
    """Optional signal feed wired into the agent at startup.

    ``kind`` is "csv" (replayed capture file) or "random" (seeded
    synthetic source).  Real vehicle feeds attach through the same
    signal-plane interface programmatically.
    """

    kind: str
    name: str = ""
    path: str = ""
    speed: float = 1.0
    loop: bool = True
    seed: int = 0
    period_ms: int = 1000
    low: float = 0.0
    high: float = 1.0

    @classmethod
    def from_raw(cls, raw: dict[str, Any]) -> "SignalSourceConfig":
        kind = raw.get("kind")
        if kind not in ("csv", "random"):
            raise ConfigError(f"unknown signal source kind: {kind!r}")
        return cls(
            kind=kind,
            name=raw.get("name", ""),
            path=raw.get("path", ""),
            speed=float(raw.get("speed", 1.0)),
            loop=bool(raw.get("loop", True)),
            seed=int(raw.get("seed", 0)),
            period_ms=int(raw.get("period_ms", 1000)),
            low=float(raw.get("low", 0.0)),
            high=float(raw.get("high", 1.0)),
        )


@dataclass(slots=True)
class AgentConfig:
    client_id: str
    server_addr: str
    bus_addr: str
    token: str
    data_dir: str
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    online_window_s: float = 30.0
    # Retry pacing for server calls; tests shrink these to keep fast.
    retry_base_s: float = 1.0
    retry_cap_s: float = 60.0
    # Periodic state refetch keeps the client marked online and heals
    # any dropped notifications.  0 disables it.
    refetch_interval_s: float = 20.0
    signals: list[SignalSourceConfig] = field(default_factory=list)

    @classmethod
    def from_raw(cls, raw: dict[str, Any]) -> "AgentConfig":
        try:
            return cls(
                client_id=raw["client_id"],
                server_addr=raw["server_addr"],
                bus_addr=raw["bus_addr"],
                token=raw["token"],
                data_dir=raw["data_dir"],
                sandbox=SandboxConfig.from_raw(raw.get("sandbox", {})),
                online_window_s=float(raw.get("online_window_s", 30.0)),
                retry_base_s=float(raw.get("retry_base_s", 1.0)),
                retry_cap_s=float(raw.get("retry_cap_s", 60.0)),
                refetch_interval_s=float(raw.get("refetch_interval_s", 20.0)),
                signals=[
                    SignalSourceConfig.from_raw(s) for s in raw.get("signals", [])
                ],
            )
        except KeyError as exc:
            raise ConfigError(f"agent config missing key {exc.args[0]!r}") from exc


@dataclass(slots=True)
class UserConfig:
    server_addr: str
    bus_addr: str
    token: str

    @classmethod
    def from_raw(cls, raw: dict[str, Any]) -> "UserConfig":
        try:
            return cls(
                server_addr=raw["server_addr"],
                bus_addr=raw["bus_addr"],
                token=raw["token"],
            )
        except KeyError as exc:
            raise ConfigError(f"user config missing key {exc.args[0]!r}") from exc


def _load_json(path: str | Path) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def resolve_config_path(explicit: str | None) -> str:
    """Apply the environment override, then the explicit path."""
    override = os.environ.get(CONFIG_ENV_VAR)
    if override:
        return override
    if explicit:
        return explicit
    raise ConfigError(
        f"no config path given and {CONFIG_ENV_VAR} is not set"
    )


def load_agent_config(path: str | None) -> AgentConfig:
    return AgentConfig.from_raw(_load_json(resolve_config_path(path)))


def load_user_config(path: str | None) -> UserConfig:
    return UserConfig.from_raw(_load_json(resolve_config_path(path)))


def parse_addr(addr: str) -> tuple[str, int]:
    """Split "host:port"; bare ports bind loopback."""
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ConfigError(f"address {addr!r} lacks a numeric port")
    return (host or "127.0.0.1", int(port))
