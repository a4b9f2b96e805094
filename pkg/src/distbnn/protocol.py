"""Round-synchronized peer state exchange.

Every peer broadcasts its state for the current round, waits for the states
of all peers, runs its node update, announces ``RoundComplete`` and moves to
the next round once every peer has announced completion. A state tagged with
the next round means its sender already saw everyone finish, so the receiver
finishes its own round early to catch up.

:class:`PeerLoop` is the transport-free state machine; :class:`SimulatedTransport`
delivers messages with seeded random delays; :func:`run_deterministic` and
:func:`run_threaded` drive a full roster over it. Broadcasts include the
sender, which is how a peer's own round-0 state reaches its state table.
"""

from __future__ import annotations

import csv
import heapq
import io
import queue
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"BNPX"
VERSION = 1
_HEADER = struct.Struct("<4sBBIII")  # magic, version, kind, round, sender, payload count


class Kind(IntEnum):
    STATE = 0
    ROUND_COMPLETE = 1


class ProtocolViolation(RuntimeError):
    pass


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    round: int
    sender: int
    payload: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == Kind.ROUND_COMPLETE and self.payload is not None:
            raise ValueError("RoundComplete carries no payload")
        if self.kind == Kind.STATE and self.payload is None:
            raise ValueError("State message needs a payload")
        if self.round < 0 or self.sender < 0:
            raise ValueError("round and sender must be nonnegative")
        if self.payload is not None:
            p = np.array(self.payload, dtype="<f8").reshape(-1)
            p.setflags(write=False)
            object.__setattr__(self, "payload", p)

    def __eq__(self, other):
        if not isinstance(other, ProtocolMessage):
            return NotImplemented
        if (self.kind, self.round, self.sender) != (other.kind, other.round, other.sender):
            return False
        if self.payload is None or other.payload is None:
            return self.payload is None and other.payload is None
        # bitwise comparison so NaN payloads still round-trip
        return self.payload.tobytes() == other.payload.tobytes()

    __hash__ = None


def state_message(round_: int, sender: int, payload) -> ProtocolMessage:
    return ProtocolMessage(Kind.STATE, round_, sender, np.asarray(payload, dtype=np.float64))


def complete_message(round_: int, sender: int) -> ProtocolMessage:
    return ProtocolMessage(Kind.ROUND_COMPLETE, round_, sender)


# ---------------------------------------------------------------------------
# wire format:
#   offset 0  4s  magic "BNPX"
#   offset 4  u8  version (1)
#   offset 5  u8  kind (0 State, 1 RoundComplete)
#   offset 6  u32 round
#   offset 10 u32 sender id
#   offset 14 u32 payload count (float64 entries)
#   offset 18 payload, little-endian float64
# All integers little-endian.

def encode_message(msg: ProtocolMessage) -> bytes:
    payload = b"" if msg.payload is None else msg.payload.astype("<f8").tobytes()
    count = 0 if msg.payload is None else msg.payload.size
    if count >= 2**32:
        raise ValueError("payload too large")
    return _HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.round, msg.sender, count) + payload


def decode_message(buf: bytes) -> ProtocolMessage:
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise DecodeError(f"truncated header at offset {len(buf)} (need {_HEADER.size} bytes)")
    magic, version, kind, round_, sender, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DecodeError("bad magic at offset 0")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version} at offset 4")
    try:
        kind = Kind(kind)
    except ValueError:
        raise DecodeError(f"unknown message kind {kind} at offset 5") from None
    if kind == Kind.ROUND_COMPLETE and count != 0:
        raise DecodeError("RoundComplete with nonzero payload count at offset 14")
    end = _HEADER.size + 8 * count
    if len(buf) < end:
        raise DecodeError(f"truncated payload at offset {len(buf)} (need {end} bytes)")
    if len(buf) > end:
        raise DecodeError(f"trailing bytes at offset {end}")
    if kind == Kind.ROUND_COMPLETE:
        return ProtocolMessage(kind, round_, sender)
    payload = np.frombuffer(buf, dtype="<f8", count=count, offset=_HEADER.size)
    return ProtocolMessage(kind, round_, sender, payload)


# ---------------------------------------------------------------------------
# per-peer state machine

# node_update_fn(own_state, peer_states_by_id, round) -> new own state
NodeUpdateFn = Callable[[object, dict, int], object]


@dataclass
class Event:
    tick: int
    peer: int
    kind: str
    round: int


@dataclass
class PeerLoop:
    """One peer's receive loop, minus the socket.

    ``peer_state`` maps each roster id to ``(round_tag, state)`` or ``None``;
    the tag is kept so a harness can check that each node update consumed the
    states of a single round.
    """

    id: int
    roster: tuple[int, ...]
    max_round: int
    state: object
    node_update_fn: NodeUpdateFn
    encode_state: Callable[[object], np.ndarray] = field(default=lambda s: s)
    decode_state: Callable[[np.ndarray], object] = field(default=lambda p: p)
    on_event: Callable[[str, int], None] | None = None

    round: int = 0
    peer_complete: dict = field(default_factory=dict)
    peer_state: dict = field(default_factory=dict)
    updates: int = 0
    consumed: list = field(default_factory=list)
    _completed_round: int = -1

    def __post_init__(self):
        if self.id not in self.roster:
            raise ValueError("peer id must be part of the roster")
        if self.max_round < 1:
            raise ValueError("max_round must be positive")
        self.roster = tuple(sorted(self.roster))
        self.peer_complete = {p: False for p in self.roster}
        self.peer_state = {p: None for p in self.roster}

    @property
    def done(self) -> bool:
        return self.round >= self.max_round

    def _emit(self, kind: str, round_: int | None = None) -> None:
        if self.on_event is not None:
            self.on_event(kind, self.round if round_ is None else round_)

    def start(self) -> list[ProtocolMessage]:
        self._emit("send_state")
        return [state_message(0, self.id, self.encode_state(self.state))]

    def finish_round(self) -> list[ProtocolMessage]:
        self.peer_complete = {p: False for p in self.roster}
        self.round += 1
        self._emit("finish_round")
        if self.done:
            return []
        self._emit("send_state")
        return [state_message(self.round, self.id, self.encode_state(self.state))]

    def handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        """Process one received message and return the messages to broadcast."""
        if self.done:
            return []
        if msg.sender not in self.peer_state:
            raise ProtocolViolation(f"peer {self.id}: message from unknown peer {msg.sender}")
        if msg.round > self.max_round:
            raise ProtocolViolation(f"peer {self.id}: message round {msg.round} exceeds max_round")
        out: list[ProtocolMessage] = []

        if msg.kind == Kind.ROUND_COMPLETE:
            if msg.round < self.round:
                self._emit("discard_late_complete", msg.round)
            elif msg.round > self.round:
                raise ProtocolViolation(
                    f"peer {self.id}: RoundComplete for round {msg.round} while in round {self.round}"
                )
            else:
                self._emit("recv_complete", msg.round)
                self.peer_complete[msg.sender] = True
        else:
            if msg.round > self.round + 1:
                raise ProtocolViolation(
                    f"peer {self.id}: state for round {msg.round} while in round {self.round}"
                )
            if msg.round == self.round + 1:
                if self._completed_round != self.round:
                    raise ProtocolViolation(
                        f"peer {self.id}: future state arrived before own round {self.round} completed"
                    )
                out += self.finish_round()
                if self.done:
                    return out
            held = self.peer_state[msg.sender]
            if msg.round < self.round or (held is not None and held[0] > msg.round):
                self._emit("discard_late_state", msg.round)
            else:
                self._emit("recv_state", msg.round)
                self.peer_state[msg.sender] = (msg.round, self.decode_state(msg.payload))

        if all(v is not None and v[0] == self.round for v in self.peer_state.values()):
            out += self._node_update()

        if all(self.peer_complete.values()):
            out += self.finish_round()
        return out

    def _node_update(self) -> list[ProtocolMessage]:
        tags = {p: v[0] for p, v in self.peer_state.items()}
        states = {p: v[1] for p, v in self.peer_state.items()}
        self.consumed.append((self.round, tags))
        self._emit("node_update")
        self.state = self.node_update_fn(self.state, states, self.round)
        self.updates += 1
        self.peer_state = {p: None for p in self.roster}
        self.peer_complete[self.id] = True
        # own entry is already current for the next round
        self.peer_state[self.id] = (self.round + 1, self.state)
        self._completed_round = self.round
        self._emit("send_complete")
        return [complete_message(self.round, self.id)]


# ---------------------------------------------------------------------------
# simulated network

@dataclass
class SimulatedTransport:
    """In-process broadcast network with seeded integer delays.

    Every send is copied to all roster members (sender included) and each copy
    gets its own delay drawn uniformly from ``[min_delay, max_delay]`` ticks.
    Copies due at the same tick come out in send order.
    """

    roster: Sequence[int]
    seed: int = 0
    min_delay: int = 0
    max_delay: int = 0
    codec: bool = False
    _heap: list = field(default_factory=list, repr=False)
    _seq: int = 0
    sent: int = 0
    delivered: int = 0

    def __post_init__(self):
        if not 0 <= self.min_delay <= self.max_delay:
            raise ValueError("need 0 <= min_delay <= max_delay")
        self.roster = tuple(self.roster)
        self._rng = np.random.default_rng(self.seed)

    def broadcast(self, msg: ProtocolMessage, now: int) -> None:
        wire = encode_message(msg) if self.codec else msg
        for r in self.roster:
            if self.max_delay > self.min_delay:
                delay = int(self._rng.integers(self.min_delay, self.max_delay + 1))
            else:
                delay = self.min_delay
            heapq.heappush(self._heap, (now + delay, self._seq, r, wire))
            self._seq += 1
            self.sent += 1

    def step(self, now: int) -> list[tuple[int, ProtocolMessage]]:
        out = []
        while self._heap and self._heap[0][0] <= now:
            _, _, r, wire = heapq.heappop(self._heap)
            out.append((r, decode_message(wire) if self.codec else wire))
            self.delivered += 1
        return out

    def pending(self) -> int:
        return len(self._heap)


def transport_step(transport: SimulatedTransport, now: int) -> list[tuple[int, ProtocolMessage]]:
    return transport.step(now)


class EventLog:
    """Collects protocol events; ``to_csv`` gives ``tick,peer,event,round`` rows."""

    def __init__(self):
        self.events: list[Event] = []
        self.tick = 0
        self._lock = threading.Lock()

    def hook(self, peer: int) -> Callable[[str, int], None]:
        def emit(kind: str, round_: int) -> None:
            with self._lock:
                self.events.append(Event(self.tick, peer, kind, round_))

        return emit

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "peer", "event", "round"])
        for e in self.events:
            w.writerow([e.tick, e.peer, e.kind, e.round])
        return buf.getvalue()


@dataclass
class RunResult:
    states: dict
    loops: dict
    ticks: int
    log: EventLog
    transport: SimulatedTransport | None = None


def _make_loops(initial_states, max_round, node_update_fns, log, encode_state, decode_state):
    roster = tuple(sorted(initial_states))
    return {
        p: PeerLoop(
            p,
            roster,
            max_round,
            initial_states[p],
            node_update_fns[p],
            encode_state=encode_state,
            decode_state=decode_state,
            on_event=log.hook(p),
        )
        for p in roster
    }


def run_deterministic(
    initial_states: dict,
    max_round: int,
    node_update_fns: dict,
    transport: SimulatedTransport | None = None,
    tick_budget: int = 10**6,
    encode_state: Callable = lambda s: s,
    decode_state: Callable = lambda p: p,
    log: EventLog | None = None,
) -> RunResult:
    """Single-threaded round-robin driver over a simulated transport.

    ``log.tick`` is the simulated clock; node updates may read it.
    """
    log = log if log is not None else EventLog()
    loops = _make_loops(initial_states, max_round, node_update_fns, log, encode_state, decode_state)
    if transport is None:
        transport = SimulatedTransport(tuple(loops))
    for p in loops:
        for m in loops[p].start():
            transport.broadcast(m, 0)
    tick = 0
    while not all(lp.done for lp in loops.values()):
        if tick > tick_budget:
            stuck = {p: lp.round for p, lp in loops.items()}
            raise ProtocolViolation(f"tick budget {tick_budget} exhausted; peer rounds {stuck}")
        if transport.pending() == 0:
            stuck = {p: lp.round for p, lp in loops.items()}
            raise ProtocolViolation(f"deadlock: no messages in flight; peer rounds {stuck}")
        log.tick = tick
        # zero-delay sends made while handling are delivered within the same tick
        while True:
            batch = transport.step(tick)
            if not batch:
                break
            for recipient, msg in batch:
                for m in loops[recipient].handle(msg):
                    transport.broadcast(m, tick)
        tick += 1
    # drain: finished peers ignore whatever is still in flight
    while transport.pending():
        log.tick = tick
        for recipient, msg in transport.step(tick):
            loops[recipient].handle(msg)
        tick += 1
    return RunResult({p: lp.state for p, lp in loops.items()}, loops, tick, log, transport)


class QueueEndpoint:
    """Blocking endpoint for threaded runs: ``send`` broadcasts to every inbox."""

    def __init__(self, peer: int, inboxes: dict[int, queue.Queue]):
        self.peer = peer
        self._inboxes = inboxes

    def send(self, msg: ProtocolMessage) -> None:
        wire = encode_message(msg)
        for q in self._inboxes.values():
            q.put(wire)

    def receive(self, timeout: float | None = None) -> ProtocolMessage:
        return decode_message(self._inboxes[self.peer].get(timeout=timeout))


def run_peer(
    max_round: int,
    endpoint,
    peer_id: int,
    initial_state,
    node_update_fn: NodeUpdateFn,
    roster: Iterable[int],
    encode_state: Callable = lambda s: s,
    decode_state: Callable = lambda p: p,
    on_event=None,
    timeout: float | None = 60.0,
):
    """Blocking loop for one peer over an endpoint with ``send``/``receive``."""
    loop = PeerLoop(
        peer_id,
        tuple(roster),
        max_round,
        initial_state,
        node_update_fn,
        encode_state=encode_state,
        decode_state=decode_state,
        on_event=on_event,
    )
    for m in loop.start():
        endpoint.send(m)
    while not loop.done:
        try:
            msg = endpoint.receive(timeout=timeout)
        except queue.Empty:
            raise ProtocolViolation(f"peer {peer_id}: no message within {timeout}s in round {loop.round}") from None
        for m in loop.handle(msg):
            endpoint.send(m)
    return loop


def run_threaded(
    initial_states: dict,
    max_round: int,
    node_update_fns: dict,
    encode_state: Callable = lambda s: np.asarray(s, dtype=np.float64),
    decode_state: Callable = lambda p: p,
    timeout: float | None = 60.0,
    log: EventLog | None = None,
) -> RunResult:
    """One thread per peer; messages pass through the wire codec."""
    roster = tuple(sorted(initial_states))
    inboxes = {p: queue.Queue() for p in roster}
    log = log if log is not None else EventLog()
    loops: dict = {}
    errors: list[BaseException] = []

    def worker(p):
        try:
            loops[p] = run_peer(
                max_round,
                QueueEndpoint(p, inboxes),
                p,
                initial_states[p],
                node_update_fns[p],
                roster,
                encode_state,
                decode_state,
                log.hook(p),
                timeout,
            )
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(p,), name=f"peer-{p}") for p in roster]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return RunResult({p: loops[p].state for p in roster}, loops, 0, log)
