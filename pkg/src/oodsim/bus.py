"""In-process topic bus with latest-value (conflating) and bounded-queue delivery.

The camera topic runs in Latest mode: an unread frame is silently replaced by a
newer one, which is exactly the frame-dropping behavior of a slow consumer
reading "the latest image available". Per-hop pipeline timestamps are collected
in a TraceLog and written out as CSV for replay and analysis.
"""

from __future__ import annotations

import csv
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .clock import Clock

STAGES = ("capture", "ingest", "detect_done", "estop_sent", "motor_zeroed")
_STAGE_INDEX = {name: i for i, name in enumerate(STAGES)}


class BusError(Exception):
    pass


class DuplicateTopicError(BusError):
    pass


class UnknownTopicError(BusError):
    pass


class StageOrderError(BusError):
    pass


@dataclass(frozen=True)
class Envelope:
    topic: str
    seq: int
    payload: Any
    publish_ns: int
    capture_ns: int


@dataclass(frozen=True)
class TopicPolicy:
    mode: str  # "latest" | "queue"
    capacity: int = 1

    def __post_init__(self):
        if self.mode not in ("latest", "queue"):
            raise ValueError(f"unknown topic mode {self.mode!r}")
        if self.mode == "queue" and self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")


LATEST = TopicPolicy("latest")


def queue_policy(capacity: int) -> TopicPolicy:
    return TopicPolicy("queue", capacity)


class Subscriber:
    """One consumer's view of a topic. Use from a single task at a time."""

    def __init__(self, topic: "Topic"):
        self._topic = topic
        self._lock = threading.Lock()
        self._buf = deque()
        self.consumed = 0
        self.drops = 0

    def _offer(self, env: Envelope) -> None:
        with self._lock:
            if self._topic.policy.mode == "latest":
                if self._buf:
                    self._buf.clear()
                    self.drops += 1
            elif len(self._buf) >= self._topic.policy.capacity:
                self._buf.popleft()
                self.drops += 1
            self._buf.append(env)

    def take_latest(self) -> Envelope | None:
        """Return and consume the newest unread envelope, dropping older ones."""
        with self._lock:
            if not self._buf:
                return None
            env = self._buf.pop()
            self.drops += len(self._buf)
            self._buf.clear()
            self.consumed += 1
            return env

    def take(self) -> Envelope | None:
        """Return and consume the oldest unread envelope (FIFO)."""
        with self._lock:
            if not self._buf:
                return None
            self.consumed += 1
            return self._buf.popleft()

    def unread(self) -> int:
        with self._lock:
            return len(self._buf)


class Topic:
    def __init__(self, name: str, policy: TopicPolicy, clock: Clock):
        self.name = name
        self.policy = policy
        self._clock = clock
        self._lock = threading.Lock()
        self._subs: list[Subscriber] = []
        self._retained = deque()  # store for late joiners, bounded per policy
        self._next_seq = 1
        self.drops = 0

    def subscribe(self) -> Subscriber:
        sub = Subscriber(self)
        with self._lock:
            self._subs.append(sub)
            for env in self._retained:
                sub._offer(env)
        return sub

    def publish(self, payload: Any, capture_ns: int | None = None) -> int:
        now = self._clock.now_ns()
        if capture_ns is None:
            capture_ns = now
        if now < capture_ns:
            raise BusError(
                f"publish at {now} precedes capture timestamp {capture_ns}"
            )
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            env = Envelope(self.name, seq, payload, now, capture_ns)
            cap = 1 if self.policy.mode == "latest" else self.policy.capacity
            if len(self._retained) >= cap:
                self._retained.popleft()
                self.drops += 1
            self._retained.append(env)
            subs = list(self._subs)
        for sub in subs:
            sub._offer(env)
        return seq

    def retained(self) -> list[Envelope]:
        with self._lock:
            return list(self._retained)


class Bus:
    """Topic registry. In virtual-clock mode everything is single-threaded."""

    def __init__(self, clock: Clock):
        self._clock = clock
        self._lock = threading.Lock()
        self._topics: dict[str, Topic] = {}

    def create_topic(self, name: str, policy: TopicPolicy = LATEST) -> Topic:
        with self._lock:
            if name in self._topics:
                raise DuplicateTopicError(f"topic {name!r} already exists")
            topic = Topic(name, policy, self._clock)
            self._topics[name] = topic
            return topic

    def topic(self, name: str) -> Topic:
        with self._lock:
            try:
                return self._topics[name]
            except KeyError:
                raise UnknownTopicError(f"no topic {name!r}") from None

    def publish(self, name: str, payload: Any, capture_ns: int | None = None) -> int:
        return self.topic(name).publish(payload, capture_ns)


@dataclass(frozen=True)
class HopRecord:
    seq: int
    topic: str
    stage: str
    t_ns: int


@dataclass
class TraceLog:
    """Ordered per-frame stage timestamps for one run."""

    records: list[HopRecord] = field(default_factory=list)
    _by_seq: dict[int, dict[str, int]] = field(default_factory=dict)

    def record_hop(self, seq: int, topic: str, stage: str, t_ns: int) -> None:
        if stage not in _STAGE_INDEX:
            raise StageOrderError(f"unknown stage {stage!r}")
        idx = _STAGE_INDEX[stage]
        stages = self._by_seq.setdefault(seq, {})
        for other, t_other in stages.items():
            other_idx = _STAGE_INDEX[other]
            if other_idx < idx and t_other > t_ns:
                raise StageOrderError(
                    f"seq {seq}: stage {stage} at {t_ns} precedes {other} at {t_other}"
                )
            if other_idx > idx and t_other < t_ns:
                raise StageOrderError(
                    f"seq {seq}: stage {stage} at {t_ns} follows {other} at {t_other}"
                )
        stages[stage] = t_ns
        self.records.append(HopRecord(seq, topic, stage, t_ns))

    def stage_time(self, seq: int, stage: str) -> int | None:
        return self._by_seq.get(seq, {}).get(stage)

    def seqs_with(self, *stages: str) -> list[int]:
        out = []
        for seq, have in self._by_seq.items():
            if all(s in have for s in stages):
                out.append(seq)
        return sorted(out)

    def hop_latency_ns(self, seq: int, start: str, end: str) -> int | None:
        t0 = self.stage_time(seq, start)
        t1 = self.stage_time(seq, end)
        if t0 is None or t1 is None:
            return None
        return t1 - t0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seq", "topic", "stage", "timestamp_ns"])
            for r in self.records:
                w.writerow([r.seq, r.topic, r.stage, r.t_ns])

    @classmethod
    def read_csv(cls, path) -> "TraceLog":
        log = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["seq", "topic", "stage", "timestamp_ns"]:
                raise BusError(f"bad trace header in {path}: {header}")
            for row in reader:
                seq, topic, stage, t = row
                log.record_hop(int(seq), topic, stage, int(t))
        return log
