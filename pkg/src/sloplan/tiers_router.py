"""Service tiers and sequential routing across replicas.

A request lands on a replica chosen round-robin.  If that replica's
scheduler declines it, the controller offers it to the next replica in ring
order, paying a small network delay per hop, until ``routing_limit`` hops
are used up.  The backup policy then either drops the request or parks it
in the origin replica's best-effort queue, where it only consumes leftover
batch capacity and can be preempted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidParametersError

BACKUP_DECLINE = "decline"
BACKUP_BEST_EFFORT = "best_effort_on_origin"


@dataclass(frozen=True)
class RoutingPolicy:
    num_replicas: int = 1
    routing_limit: int = 3
    backup: str = BACKUP_BEST_EFFORT
    network_delay: float = 1e-3

    def __post_init__(self):
        if self.num_replicas < 1:
            raise InvalidParametersError("need at least one replica")
        if self.routing_limit < 0:
            raise InvalidParametersError("routing_limit must be >= 0")
        if self.backup not in (BACKUP_DECLINE, BACKUP_BEST_EFFORT):
            raise InvalidParametersError(f"unknown backup policy {self.backup!r}")
        if self.network_delay < 0:
            raise InvalidParametersError("network_delay must be >= 0")

    @property
    def ring(self) -> tuple[int, ...]:
        return tuple(range(self.num_replicas))

    def max_hops(self) -> int:
        # Never revisit the origin: at most every other replica once.
        return min(self.routing_limit, self.num_replicas - 1)


@dataclass(frozen=True)
class Placement:
    """Outcome of a decline: route onward, demote, or drop."""

    action: str  # "route" | "best_effort" | "drop"
    replica: int
    delay: float = 0.0


@dataclass
class Dispatcher:
    """Round-robin origin choice plus the per-decline routing decision."""

    policy: RoutingPolicy = field(default_factory=RoutingPolicy)
    _next: int = 0

    def origin(self) -> int:
        r = self._next
        self._next = (self._next + 1) % self.policy.num_replicas
        return r

    def on_decline(self, origin: int, current: int, hops: int) -> Placement:
        p = self.policy
        if hops < p.max_hops():
            return Placement("route", (current + 1) % p.num_replicas, p.network_delay)
        if p.backup == BACKUP_BEST_EFFORT:
            return Placement("best_effort", origin, p.network_delay if current != origin else 0.0)
        return Placement("drop", current)


def dispatch(request_id: str, decisions: list[bool], policy: RoutingPolicy, origin: int = 0) -> Placement:
    """Placement of one request given each replica's admit decision.

    ``decisions[r]`` says whether replica ``r`` would admit the request; the
    controller consults replicas in ring order starting at ``origin``.  Used
    directly by tests and the narrative demos; the simulator makes the same
    calls through :class:`Dispatcher` as decisions arrive.
    """
    if len(decisions) != policy.num_replicas:
        raise InvalidParametersError("one decision per replica required")
    current = origin
    hops = 0
    d = Dispatcher(policy)
    while True:
        if decisions[current]:
            return Placement("admit", current, hops * policy.network_delay)
        nxt = d.on_decline(origin, current, hops)
        if nxt.action != "route":
            return nxt
        current = nxt.replica
        hops += 1


def demote_to_best_effort(state, replica) -> None:
    """Move a declined request into ``replica``'s best-effort FIFO."""
    state.tier = "best_effort"
    state.demoted = True
    state.replica = replica.id
    replica.best_effort.append(state)


@dataclass(frozen=True)
class ClusterConfig:
    replicas: int = 1
    memory_total: int = 1 << 20
    routing_limit: int = 3
    backup: str = BACKUP_BEST_EFFORT
    network_delay: float = 1e-3

    def policy(self) -> RoutingPolicy:
        return RoutingPolicy(self.replicas, self.routing_limit, self.backup, self.network_delay)

    def to_dict(self) -> dict:
        return {
            "replicas": self.replicas,
            "memory_total": self.memory_total,
            "routing_limit": self.routing_limit,
            "backup": self.backup,
            "network_delay_s": self.network_delay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        cfg = cls(
            replicas=int(d.get("replicas", 1)),
            memory_total=int(d.get("memory_total", 1 << 20)),
            routing_limit=int(d.get("routing_limit", 3)),
            backup=str(d.get("backup", BACKUP_BEST_EFFORT)),
            network_delay=float(d.get("network_delay_s", 1e-3)),
        )
        cfg.policy()  # validates
        return cfg


def load_cluster(path: str | Path) -> ClusterConfig:
    return ClusterConfig.from_dict(json.loads(Path(path).read_text()))
