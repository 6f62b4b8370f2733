"""Topologies, deterministic message delivery, byte-exact traffic accounting.

Synchronous-round model: messages sent during a phase are invisible until the
next phase boundary (bus.flush). Delivery order is canonical, sorted by
(sender, receiver), so replaying a seed reproduces the ledger bit-exactly.

Wire-format accounting: every message costs a 32-byte header; a model update
adds 4 bytes per carried parameter (32-bit reals), votes and no-update
notices are header-only.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, GraphError, ProtocolError
from .seeding import derive_seed

HEADER_BYTES = 32
BYTES_PER_PARAM = 4

_MAX_GRAPH_ATTEMPTS = 100


class MessageKind(Enum):
    MODEL_UPDATE = "model_update"
    VOTE = "vote"
    NO_UPDATE = "no_update"


@dataclass(frozen=True)
class Topology:
    """Undirected connected graph over client ids 0..num_clients-1."""

    num_clients: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        adjacency: dict[int, list[int]] = {i: [] for i in range(self.num_clients)}
        for a, b in self.edges:
            if a == b:
                raise ConfigError(f"self-loop at client {a}")
            if not (0 <= a < self.num_clients and 0 <= b < self.num_clients):
                raise ConfigError(f"edge ({a},{b}) outside client range")
            adjacency[a].append(b)
            adjacency[b].append(a)
        object.__setattr__(
            self, "_adj", {i: tuple(sorted(peers)) for i, peers in adjacency.items()}
        )

    def neighbors(self, client: int) -> tuple[int, ...]:
        return self._adj[client]

    def degree(self, client: int) -> int:
        return len(self._adj[client])

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges


def _is_connected(n: int, adj: dict[int, list[int]]) -> bool:
    seen = {0}
    stack = [0]
    while stack:
        for peer in adj[stack.pop()]:
            if peer not in seen:
                seen.add(peer)
                stack.append(peer)
    return len(seen) == n


def full_topology(n: int) -> Topology:
    """Complete graph K_n."""
    if n < 2:
        raise ConfigError("topology needs n >= 2")
    return Topology(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))


def erdos_renyi(n: int, p: float, seed: int) -> Topology:
    """G(n, p) conditioned on connectivity via seeded redraws."""
    if n < 2:
        raise ConfigError("topology needs n >= 2")
    if not 0 < p <= 1:
        raise ConfigError("edge probability must be in (0, 1]")
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for attempt in range(_MAX_GRAPH_ATTEMPTS):
        rng = np.random.default_rng(derive_seed(seed, "erdos-attempt", attempt))
        mask = rng.random(len(pairs)) < p
        edges = [pair for pair, keep in zip(pairs, mask) if keep]
        adj: dict[int, list[int]] = {i: [] for i in range(n)}
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        if _is_connected(n, adj):
            return Topology(n, frozenset(edges))
    raise GraphError(f"no connected graph in {_MAX_GRAPH_ATTEMPTS} draws (n={n}, p={p})")


def message_byte_size(payload: tuple[np.ndarray, ...] | None) -> int:
    params = sum(a.shape[0] for a in payload) if payload else 0
    return HEADER_BYTES + BYTES_PER_PARAM * params


@dataclass(frozen=True)
class RoundMessage:
    sender: int
    receiver: int
    kind: MessageKind
    round: int
    byte_size: int
    payload: tuple[np.ndarray, ...] | None = None


class TrafficLedger:
    """Byte counts per client, per round, and per message kind."""

    def __init__(self):
        self.bytes_sent: dict[int, int] = defaultdict(int)
        self.bytes_received: dict[int, int] = defaultdict(int)
        self.round_sent: dict[tuple[int, int], int] = defaultdict(int)  # (round, client)
        self.round_received: dict[tuple[int, int], int] = defaultdict(int)
        self.kind_bytes: dict[MessageKind, int] = defaultdict(int)
        self.kind_count: dict[MessageKind, int] = defaultdict(int)
        self.round_kind_bytes: dict[tuple[int, MessageKind], int] = defaultdict(int)

    def record(self, msg: RoundMessage):
        self.bytes_sent[msg.sender] += msg.byte_size
        self.bytes_received[msg.receiver] += msg.byte_size
        self.round_sent[(msg.round, msg.sender)] += msg.byte_size
        self.round_received[(msg.round, msg.receiver)] += msg.byte_size
        self.kind_bytes[msg.kind] += msg.byte_size
        self.kind_count[msg.kind] += 1
        self.round_kind_bytes[(msg.round, msg.kind)] += msg.byte_size

    def total_sent(self) -> int:
        return sum(self.bytes_sent.values())

    def total_received(self) -> int:
        return sum(self.bytes_received.values())

    def round_bytes(self, rnd: int, client: int) -> tuple[int, int]:
        return self.round_sent.get((rnd, client), 0), self.round_received.get((rnd, client), 0)

    def update_bytes_in_round(self, rnd: int) -> int:
        """Model-carrying traffic (updates + no-update notices), votes excluded."""
        return self.round_kind_bytes.get((rnd, MessageKind.MODEL_UPDATE), 0) + self.round_kind_bytes.get(
            (rnd, MessageKind.NO_UPDATE), 0
        )


@dataclass
class MessageBus:
    """Phase-synchronous delivery owned by the round engine."""

    topo: Topology
    ledger: TrafficLedger
    _pending: list[RoundMessage] = field(default_factory=list)
    _inboxes: dict[int, list[RoundMessage]] = field(default_factory=lambda: defaultdict(list))

    def send(self, msg: RoundMessage):
        if not self.topo.has_edge(msg.sender, msg.receiver):
            raise ProtocolError(f"send from {msg.sender} to non-neighbor {msg.receiver}")
        self.ledger.record(msg)
        self._pending.append(msg)

    def flush(self):
        """Phase boundary: deliver pending messages in (sender, receiver) order."""
        self._pending.sort(key=lambda m: (m.sender, m.receiver))
        for msg in self._pending:
            self._inboxes[msg.receiver].append(msg)
        self._pending = []

    def take_inbox(self, client: int) -> list[RoundMessage]:
        msgs = self._inboxes[client]
        self._inboxes[client] = []
        return msgs


def broadcast(
    bus: MessageBus,
    sender: int,
    kind: MessageKind,
    payload: tuple[np.ndarray, ...] | None,
    rnd: int,
) -> int:
    """One message per neighbor; returns the neighbor count."""
    size = message_byte_size(payload)
    neighbors = bus.topo.neighbors(sender)
    for peer in neighbors:
        bus.send(RoundMessage(sender, peer, kind, rnd, size, payload))
    return len(neighbors)
