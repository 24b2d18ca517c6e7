"""Fault schedules and the simulated network that applies them.

A FaultSchedule is plain data: fully determined by its fields,
serializable, and replayable.  SimNet turns it into per-message
decisions (delay, drop, blackout) using one seeded generator, so the
decision stream is a function of the schedule and the order in which
messages are sent.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any


@dataclass(frozen=True, slots=True)
class Blackout:
    """An interval during which RPC frames on a link are lost.

    ``client_id`` of None means every link; otherwise only traffic of
    that one agent is affected.
    """

    start_ms: int
    end_ms: int
    client_id: str | None = None

    def covers(self, t_ms: int, client_id: str) -> bool:
        if self.client_id is not None and self.client_id != client_id:
            return False
        return self.start_ms <= t_ms < self.end_ms


@dataclass(slots=True)
class FaultSchedule:
    seed: int
    notification_drop_p: float = 0.0
    rpc_blackouts: list[Blackout] = field(default_factory=list)
    # (client_id, at_ms): kill the agent process at that instant.
    agent_restarts: list[tuple[str, int]] = field(default_factory=list)
    message_delay: tuple[int, int] = (1, 5)

    def __post_init__(self) -> None:
        if not 0.0 <= self.notification_drop_p <= 1.0:
            raise ValueError("notification_drop_p must be a probability")
        lo, hi = self.message_delay
        if lo < 0 or hi < lo:
            raise ValueError("message_delay must be 0 <= min <= max")
        for b in self.rpc_blackouts:
            if b.end_ms < b.start_ms:
                raise ValueError("blackout ends before it starts")

    def last_fault_ms(self) -> int:
        """When the schedule stops interfering (drops excepted)."""
        ends = [b.end_ms for b in self.rpc_blackouts]
        ends += [at for _, at in self.agent_restarts]
        return max(ends, default=0)

    def to_json(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "notification_drop_p": self.notification_drop_p,
            "rpc_blackouts": [
                {"start_ms": b.start_ms, "end_ms": b.end_ms, "client_id": b.client_id}
                for b in self.rpc_blackouts
            ],
            "agent_restarts": [[c, at] for c, at in self.agent_restarts],
            "message_delay": list(self.message_delay),
        }

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "FaultSchedule":
        return cls(
            seed=int(raw["seed"]),
            notification_drop_p=float(raw.get("notification_drop_p", 0.0)),
            rpc_blackouts=[
                Blackout(
                    start_ms=int(b["start_ms"]),
                    end_ms=int(b["end_ms"]),
                    client_id=b.get("client_id"),
                )
                for b in raw.get("rpc_blackouts", [])
            ],
            agent_restarts=[
                (c, int(at)) for c, at in raw.get("agent_restarts", [])
            ],
            message_delay=tuple(raw.get("message_delay", (1, 5))),  # type: ignore[arg-type]
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "FaultSchedule":
        return cls.from_json(json.loads(text))


class SimNet:
    """Per-message fault decisions, consumed in send order."""

    def __init__(self, schedule: FaultSchedule) -> None:
        self.schedule = schedule
        self._rng = random.Random(schedule.seed)

    def delay_ms(self) -> int:
        lo, hi = self.schedule.message_delay
        return self._rng.randint(lo, hi)

    def drop_notification(self) -> bool:
        p = self.schedule.notification_drop_p
        if p >= 1.0:
            return True
        if p <= 0.0:
            return False
        return self._rng.random() < p

    def rpc_blocked(self, t_ms: int, client_id: str) -> bool:
        return any(b.covers(t_ms, client_id) for b in self.schedule.rpc_blackouts)
