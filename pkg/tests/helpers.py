"""Shared harnesses for protocol fuzzing and acceptance checks."""
from collections import Counter

import numpy as np

from distbnn import protocol
from distbnn.protocol import Kind, SimulatedTransport


class RecordingTransport(SimulatedTransport):
    """Counts every (recipient, message identity) sent and delivered."""

    def __post_init__(self):
        super().__post_init__()
        self.sent_copies = Counter()
        self.delivered_copies = Counter()

    def broadcast(self, msg, now):
        for r in self.roster:
            self.sent_copies[(r, int(msg.kind), msg.round, msg.sender)] += 1
        super().broadcast(msg, now)

    def step(self, now):
        out = super().step(now)
        for r, msg in out:
            self.delivered_copies[(r, int(msg.kind), msg.round, msg.sender)] += 1
        return out


def versioned_peers(n):
    """Peers whose state is ``[id, version]``; each update bumps the version and
    records exactly which peer states it consumed."""
    seen = {p: [] for p in range(n)}

    def make(p):
        def update(state, states_by_id, k):
            seen[p].append((k, {q: (int(s[0]), int(s[1])) for q, s in states_by_id.items()}))
            return np.array([float(p), state[1] + 1.0])

        return update

    initial = {p: np.array([float(p), 0.0]) for p in range(n)}
    return initial, {p: make(p) for p in range(n)}, seen


def fuzz_run(seed, n=7, max_round=10, min_delay=1, max_delay=5, codec=False):
    """Run one fuzzed schedule and return a list of violated properties (empty when safe)."""
    initial, fns, seen = versioned_peers(n)
    transport = RecordingTransport(tuple(range(n)), seed, min_delay, max_delay, codec)
    res = protocol.run_deterministic(initial, max_round, fns, transport)
    problems = []
    for p, lp in res.loops.items():
        if lp.round != max_round:
            problems.append(f"peer {p} stopped at round {lp.round}")
        if lp.updates != max_round:
            problems.append(f"peer {p} ran {lp.updates} updates")
        if [k for k, _ in seen[p]] != list(range(max_round)):
            problems.append(f"peer {p} update rounds {[k for k, _ in seen[p]]}")
        for k, states in seen[p]:
            if states != {q: (q, k) for q in range(n)}:
                problems.append(f"peer {p} round {k} consumed {states}")
        for k, tags in lp.consumed:
            if set(tags.values()) != {k}:
                problems.append(f"peer {p} round {k} tags {tags}")
        seq = [e.kind for e in res.log.events if e.peer == p and e.kind in ("node_update", "finish_round")]
        if seq != ["node_update", "finish_round"] * max_round:
            problems.append(f"peer {p} update/finish sequence {seq}")
    if transport.sent != transport.delivered:
        problems.append(f"sent {transport.sent} != delivered {transport.delivered}")
    if transport.sent_copies != transport.delivered_copies:
        problems.append("delivered multiset differs from sent multiset")
    if any(c != 1 for c in transport.delivered_copies.values()):
        problems.append("duplicate message identity")
    total = sum(lp.updates for lp in res.loops.values())
    return problems, total
