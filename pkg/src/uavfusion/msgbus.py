"""Typed publish/subscribe bus with per-topic rate and bandwidth accounting."""

from __future__ import annotations

import bisect
import enum
import json
from collections import deque
from dataclasses import dataclass
from typing import Any

KIB = 1024.0
MIB = 1024.0 * 1024.0


class PayloadKind(enum.Enum):
    LaserScan = "LaserScan"
    Odometry = "Odometry"
    Imu = "Imu"
    DepthImage = "DepthImage"
    PointCloud = "PointCloud"
    AttitudeCommand = "AttitudeCommand"
    ConfidenceMap = "ConfidenceMap"
    EdgeImage = "EdgeImage"


# Bytes per message, back-derived from the measured rate/bandwidth pairs
# (KB = 1024 B, kbps = 1000 bit/s).
PAYLOAD_SIZES = {
    PayloadKind.Imu: 329,
    PayloadKind.Odometry: 716,
    PayloadKind.LaserScan: 723,
    PayloadKind.DepthImage: int(round(1.55 * MIB / 6.18)),
    PayloadKind.PointCloud: 36864,
    PayloadKind.ConfidenceMap: 9216,
    PayloadKind.EdgeImage: 2304,
    PayloadKind.AttitudeCommand: 64,
}


class BusError(Exception):
    pass


class UnknownTopicError(BusError):
    pass


class PayloadKindMismatch(BusError):
    pass


class NoDataError(BusError):
    pass


class DuplicateTopicError(BusError):
    pass


@dataclass(frozen=True)
class TopicSpec:
    name: str
    payload_kind: PayloadKind
    nominal_rate: float
    payload_size: int | None = None

    def __post_init__(self):
        if not self.nominal_rate > 0:
            raise ValueError(f"{self.name}: nominal_rate must be > 0")

    @property
    def size(self) -> int:
        return self.payload_size if self.payload_size is not None else PAYLOAD_SIZES[self.payload_kind]

    @property
    def nominal_bandwidth(self) -> float:
        return self.nominal_rate * self.size


@dataclass(frozen=True)
class MessageEnvelope:
    topic: str
    seq: int
    stamp: float
    payload_size: int
    kind: PayloadKind
    payload: Any = None


class Subscription:
    """FIFO queue of envelopes for one subscriber on one topic."""

    def __init__(self, topic: str, node: str, maxlen: int | None = None):
        self.topic = topic
        self.node = node
        self.queue: deque[MessageEnvelope] = deque(maxlen=maxlen)
        self.received = 0
        self.dropped = 0

    def __len__(self):
        return len(self.queue)

    def pop(self) -> MessageEnvelope:
        return self.queue.popleft()

    def drain(self) -> list[MessageEnvelope]:
        out = list(self.queue)
        self.queue.clear()
        return out

    def latest(self) -> MessageEnvelope | None:
        """Return the newest envelope and discard the backlog."""
        if not self.queue:
            return None
        env = self.queue[-1]
        self.queue.clear()
        return env


class _TopicStats:
    __slots__ = ("stamps", "cum_bytes", "seq", "last_stamp")

    def __init__(self):
        self.stamps: list[float] = []
        self.cum_bytes: list[int] = []
        self.seq = 0
        self.last_stamp = float("-inf")


class MessageBus:
    """Synchronous bus owned by the scheduler.

    ``queue_bound`` enables a drop-oldest policy on subscriber queues; it is
    off by default.
    """

    def __init__(self, queue_bound: int | None = None):
        self.queue_bound = queue_bound
        self.topics: dict[str, TopicSpec] = {}
        self.publishers: dict[str, list[str]] = {}
        self.subscribers: dict[str, list[Subscription]] = {}
        self._stats: dict[str, _TopicStats] = {}
        self.now = 0.0

    def register(self, spec: TopicSpec) -> TopicSpec:
        if spec.name in self.topics:
            raise DuplicateTopicError(spec.name)
        self.topics[spec.name] = spec
        self.publishers[spec.name] = []
        self.subscribers[spec.name] = []
        self._stats[spec.name] = _TopicStats()
        return spec

    def _spec(self, topic: str) -> TopicSpec:
        try:
            return self.topics[topic]
        except KeyError:
            raise UnknownTopicError(topic) from None

    def advertise(self, topic: str, node: str) -> None:
        self._spec(topic)
        if node not in self.publishers[topic]:
            self.publishers[topic].append(node)

    def subscribe(self, topic: str, node: str) -> Subscription:
        self._spec(topic)
        sub = Subscription(topic, node, self.queue_bound)
        self.subscribers[topic].append(sub)
        return sub

    def publish(self, topic: str, kind: PayloadKind, payload: Any, stamp: float,
                payload_size: int | None = None) -> MessageEnvelope:
        spec = self._spec(topic)
        if kind is not spec.payload_kind:
            raise PayloadKindMismatch(f"{topic} carries {spec.payload_kind.value}, got {kind.value}")
        st = self._stats[topic]
        if stamp < st.last_stamp:
            raise BusError(f"{topic}: stamp {stamp} older than {st.last_stamp}")
        size = spec.size if payload_size is None else int(payload_size)
        st.seq += 1
        env = MessageEnvelope(topic, st.seq, stamp, size, kind, payload)
        self.deliver(env)
        return env

    def deliver(self, env: MessageEnvelope) -> None:
        """Append an already-built envelope to every subscriber queue."""
        st = self._stats[env.topic]
        st.last_stamp = env.stamp
        st.stamps.append(env.stamp)
        st.cum_bytes.append((st.cum_bytes[-1] if st.cum_bytes else 0) + env.payload_size)
        if env.stamp > self.now:
            self.now = env.stamp
        for sub in self.subscribers[env.topic]:
            if sub.queue.maxlen is not None and len(sub.queue) == sub.queue.maxlen:
                sub.dropped += 1
            sub.queue.append(env)
            sub.received += 1

    def published_count(self, topic: str) -> int:
        self._spec(topic)
        return self._stats[topic].seq

    def _window(self, topic: str, window: float, now: float | None):
        if not window > 0:
            raise ValueError("window must be > 0")
        self._spec(topic)
        st = self._stats[topic]
        end = self.now if now is None else now
        lo = bisect.bisect_right(st.stamps, end - window)
        hi = bisect.bisect_right(st.stamps, end)
        if hi <= lo:
            raise NoDataError(f"no messages on {topic} in the last {window} s")
        return st, lo, hi

    def topic_hz(self, topic: str, window: float, now: float | None = None) -> float:
        """Messages in ``(now - window, now]`` divided by ``window``."""
        _, lo, hi = self._window(topic, window, now)
        return (hi - lo) / window

    def topic_bw(self, topic: str, window: float, now: float | None = None) -> float:
        """Payload bytes in ``(now - window, now]`` divided by ``window``, in B/s."""
        st, lo, hi = self._window(topic, window, now)
        total = st.cum_bytes[hi - 1] - (st.cum_bytes[lo - 1] if lo > 0 else 0)
        return total / window

    def stats_rows(self, window: float, now: float | None = None) -> list[tuple[str, float, float]]:
        rows = []
        for name in sorted(self.topics):
            try:
                rows.append((name, self.topic_hz(name, window, now), self.topic_bw(name, window, now)))
            except NoDataError:
                rows.append((name, 0.0, 0.0))
        return rows

    def graph(self) -> dict:
        nodes = set()
        edges = []
        topics = sorted(t for t in self.topics if self.publishers[t] or self.subscribers[t])
        for t in topics:
            for p in self.publishers[t]:
                nodes.add(p)
                edges.append([p, t])
            for s in dict.fromkeys(s.node for s in self.subscribers[t]):
                nodes.add(s)
                edges.append([t, s])
        return {"nodes": sorted(nodes), "topics": topics, "edges": sorted(edges)}


def graph_export(bus: MessageBus) -> str:
    """Publisher -> topic -> subscriber adjacency as stable JSON text."""
    return json.dumps(bus.graph(), indent=2, sort_keys=True)


def stats_csv(rows) -> str:
    lines = ["topic,hz,bytes_per_s"]
    for name, hz, bw in rows:
        lines.append(f"{name},{hz:.4f},{bw:.2f}")
    return "\n".join(lines) + "\n"
