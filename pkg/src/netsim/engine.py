"""Deterministic discrete-event core with a fluid rate-shared network.

The fabric is full bisection: the only capacity constraints are the
per-endpoint egress and ingress rates. Active transfers receive max-min
fair rates, recomputed whenever a transfer starts or completes; between
recomputations every rate is constant, so completion times are exact
(no time stepping, no drift).

Transfer primitives:

* unicast      src -> dst
* multicast    src -> many dsts at one source-governed rate; the slowest
               receiver paces every branch, and the source egress carries
               the payload once
* aggregation  many srcs -> a switch with unconstrained ports; one combined
               transfer continues to the destination once the last branch
               has landed (store and forward per payload)

Determinism: events fire in (time, insertion sequence) order, every
collection iterates in insertion order, and nothing reads the wall clock.
One Simulator instance is single-threaded; independent instances can run
concurrently.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Iterable

from .errors import InternalError, ValidationError

OUT = "out"
IN = "in"

# A flow is done when its residual drops below this fraction of its size.
_DONE_REL = 1e-12


@dataclass(frozen=True)
class NodeId:
    """A simulated endpoint; role is one of worker/ps/switch."""

    role: str
    index: int

    def __str__(self):
        return f"{self.role}{self.index}"


@dataclass(frozen=True)
class Topology:
    """Full-bisection fabric parameters."""

    workers: int
    parameter_servers: int
    link_rate: float
    latency: float = 0.0

    def __post_init__(self):
        if self.workers < 1:
            raise ValidationError("topology needs at least one worker")
        if self.parameter_servers < 0:
            raise ValidationError("parameter_servers must be >= 0")
        if self.link_rate <= 0:
            raise ValidationError("link_rate must be > 0")
        if self.latency < 0:
            raise ValidationError("latency must be >= 0")


@dataclass(frozen=True)
class LogEvent:
    t: float
    node: str
    kind: str
    param: str = ""
    detail: str = ""


class Flow:
    """One in-flight transfer and the endpoint resources it occupies."""

    __slots__ = ("fid", "kind", "src", "dsts", "size", "remaining", "rate",
                 "uses", "tag", "t_start", "on_complete", "on_delivered")

    def __init__(self, fid, kind, src, dsts, size, uses, tag,
                 t_start, on_complete, on_delivered):
        self.fid = fid
        self.kind = kind
        self.src = src
        self.dsts = dsts
        self.size = size
        self.remaining = size
        self.rate = 0.0
        self.uses = uses
        self.tag = tag
        self.t_start = t_start
        self.on_complete = on_complete
        self.on_delivered = on_delivered


def max_min_rates(flows: Iterable[Flow], capacities: dict) -> dict:
    """Progressive-filling max-min fair allocation.

    Every unfrozen flow's rate rises uniformly; when a resource saturates,
    the flows crossing it freeze. Resources with infinite capacity never
    bind. Returns {fid: rate}.
    """
    flows = list(flows)
    rates = {f.fid: 0.0 for f in flows}
    if not flows:
        return rates
    uses = {f.fid: f.uses for f in flows}
    users: dict = {}
    for f in flows:
        for r in f.uses:
            users.setdefault(r, []).append(f.fid)
    cap0 = {r: float(capacities[r]) for r in users}
    rem = dict(cap0)
    active = dict.fromkeys(rates)
    frozen_res: set = set()
    rounds = 0
    while active:
        rounds += 1
        if rounds > len(users) + 1:
            raise InternalError("max-min allocation failed to converge")
        counts: dict = {}
        for fid in active:
            for r in uses[fid]:
                counts[r] = counts.get(r, 0) + 1
        inc = math.inf
        for r, n in counts.items():
            if math.isfinite(rem[r]):
                inc = min(inc, rem[r] / n)
        if not math.isfinite(inc):
            raise InternalError("flow without any finite capacity constraint")
        for fid in active:
            rates[fid] += inc
        newly_frozen = []
        for r, n in counts.items():
            if not math.isfinite(rem[r]):
                continue
            rem[r] -= inc * n
            if rem[r] <= cap0[r] * 1e-12:
                rem[r] = 0.0
                frozen_res.add(r)
                newly_frozen.append(r)
        if not newly_frozen:
            raise InternalError("max-min step made no progress")
        for fid in list(active):
            if any(r in frozen_res for r in uses[fid]):
                del active[fid]
    return rates


class Simulator:
    """Event queue, clock, fluid network and per-node bookkeeping."""

    def __init__(self, latency: float = 0.0, rate_fn=None, collect_log=True):
        if latency < 0:
            raise ValidationError("latency must be >= 0")
        self.now = 0.0
        self.latency = latency
        self._heap: list = []
        self._seq = 0
        self._caps: dict = {}
        self._flows: dict = {}
        self._fid = 0
        self._net_epoch = 0
        self._last_net_t = 0.0
        self.link_bits: dict = {}
        self.event_log: list[LogEvent] = []
        self._collect_log = collect_log
        self._rate_fn = rate_fn or max_min_rates

    @classmethod
    def from_topology(cls, topo: Topology, rate_fn=None, collect_log=True):
        sim = cls(latency=topo.latency, rate_fn=rate_fn, collect_log=collect_log)
        for i in range(topo.workers):
            sim.add_node(str(NodeId("worker", i)), topo.link_rate,
                         topo.link_rate)
        for j in range(topo.parameter_servers):
            sim.add_node(str(NodeId("ps", j)), topo.link_rate, topo.link_rate)
        return sim

    # -- nodes ------------------------------------------------------------

    def add_node(self, node: str, egress: float = math.inf,
                 ingress: float = math.inf):
        if (node, OUT) in self._caps:
            raise ValidationError(f"node {node} already exists")
        if egress <= 0 or ingress <= 0:
            raise ValidationError("node capacities must be > 0")
        self._caps[(node, OUT)] = float(egress)
        self._caps[(node, IN)] = float(ingress)
        self.link_bits[(node, OUT)] = 0.0
        self.link_bits[(node, IN)] = 0.0

    def add_switch(self, node: str):
        """A switch absorbs and emits at line rate on every port."""
        self.add_node(node, math.inf, math.inf)

    def has_node(self, node: str) -> bool:
        return (node, OUT) in self._caps

    # -- scheduling -------------------------------------------------------

    def at(self, t: float, fn: Callable, *args):
        if t < self.now:
            raise InternalError(f"event scheduled in the past ({t} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def after(self, dt: float, fn: Callable, *args):
        self.at(self.now + dt, fn, *args)

    def log(self, node: str, kind: str, param: str = "", detail: str = ""):
        if self._collect_log:
            self.event_log.append(LogEvent(self.now, node, kind, param, detail))

    def run(self, until: float = math.inf):
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            if t > until:
                return
            self.now = t
            fn(*args)

    # -- transfers ----------------------------------------------------------

    def start_unicast(self, src: str, dst: str, size: float, tag=None,
                      on_complete=None, on_delivered=None) -> int:
        """Point-to-point transfer. on_complete fires when the last bit
        leaves the source; on_delivered fires one latency later."""
        if src == dst:
            raise ValidationError("unicast src == dst")
        uses = ((src, OUT), (dst, IN))
        return self._add_flow("unicast", src, (dst,), size, uses, tag,
                              on_complete, on_delivered)

    def start_multicast(self, src: str, dsts, size: float, tag=None,
                        on_complete=None, on_delivered=None) -> int:
        """One-to-many transfer at a single source rate.

        The source egress carries the payload once; every destination
        ingress carries a full copy. A single destination degenerates to
        unicast. on_delivered fires once per destination.
        """
        dsts = tuple(dsts)
        if not dsts:
            raise ValidationError("multicast needs at least one destination")
        if len(set(dsts)) != len(dsts):
            raise ValidationError("duplicate multicast destinations")
        if src in dsts:
            raise ValidationError("multicast src among dsts")
        if len(dsts) == 1:
            return self.start_unicast(src, dsts[0], size, tag,
                                      on_complete, on_delivered)
        uses = ((src, OUT),) + tuple((d, IN) for d in dsts)
        return self._add_flow("multicast", src, dsts, size, uses, tag,
                              on_complete, on_delivered)

    def start_aggregation(self, srcs, dst: str, size: float, tag=None,
                          charged: bool = True, on_delivered=None) -> "AggGroup":
        """Fan-in then forward: every source sends a full payload to a
        dedicated switch; once the last branch lands, one combined payload
        of the same size continues to dst. With charged=False the final hop
        costs no wire time (bits are still accounted)."""
        srcs = tuple(srcs)
        if not srcs:
            raise ValidationError("aggregation needs at least one source")
        group = AggGroup(self, srcs=srcs, dst=dst, size=size, tag=tag,
                         charged=charged, on_delivered=on_delivered)
        for s in srcs:
            group.start_branch(s)
        return group

    def _add_flow(self, kind, src, dsts, size, uses, tag,
                  on_complete, on_delivered) -> int:
        if size <= 0:
            raise ValidationError(f"transfer size must be > 0, got {size}")
        for r in uses:
            if r not in self._caps:
                raise ValidationError(f"unknown node {r[0]}")
        if not any(math.isfinite(self._caps[r]) for r in uses):
            raise ValidationError("transfer touches no finite-capacity link")
        self._fid += 1
        flow = Flow(self._fid, kind, src, dsts, float(size), uses, tag,
                    self.now, on_complete, on_delivered)
        self._advance_flows()
        self._flows[flow.fid] = flow
        self.log(src, "send", _tag_str(tag),
                 f"{kind}->{','.join(dsts)} size={size!r}")
        self._reassign()
        return flow.fid

    # -- fluid machinery --------------------------------------------------

    def _advance_flows(self):
        dt = self.now - self._last_net_t
        if dt > 0.0:
            for f in self._flows.values():
                f.remaining -= f.rate * dt
                if f.remaining < 0.0:
                    f.remaining = 0.0
        self._last_net_t = self.now

    def _reassign(self):
        self._net_epoch += 1
        if not self._flows:
            return
        rates = self._rate_fn(list(self._flows.values()), self._caps)
        finish = {}
        t_next = math.inf
        for f in self._flows.values():
            f.rate = rates[f.fid]
            if f.rate <= 0.0:
                raise InternalError(f"flow {f.fid} assigned rate {f.rate}")
            finish[f.fid] = self.now + f.remaining / f.rate
            t_next = min(t_next, finish[f.fid])
        # Completion set is decided now, not re-derived from residual bits at
        # the tick: with extreme rates the bit residual after advancing can
        # round either way, and re-deriving it can live-lock the tick loop.
        slack = _DONE_REL * (abs(t_next) + 1.0)
        completing = tuple(fid for fid, t in finish.items()
                           if t <= t_next + slack)
        self.at(t_next, self._net_tick, self._net_epoch, completing)

    def _net_tick(self, epoch: int, completing: tuple):
        if epoch != self._net_epoch:
            return  # superseded by a later start/completion
        self._advance_flows()
        for fid in completing:
            f = self._flows.pop(fid)
            f.remaining = 0.0
            for r in f.uses:
                self.link_bits[r] += f.size
            self.log(f.src, "xfer_done", _tag_str(f.tag),
                     f"{f.kind}->{','.join(f.dsts)}")
            if f.on_complete is not None:
                self.after(0.0, f.on_complete, f)
            if f.on_delivered is not None:
                for d in f.dsts:
                    self.after(self.latency, self._deliver, f, d)
        self._reassign()

    def _deliver(self, flow: Flow, dst: str):
        self.log(dst, "deliver", _tag_str(flow.tag), f"from={flow.src}")
        flow.on_delivered(flow, dst)


def _tag_str(tag) -> str:
    if tag is None:
        return ""
    if isinstance(tag, str):
        return tag
    return "/".join(str(x) for x in tag)


class AggGroup:
    """Fan-in bookkeeping for one aggregated payload.

    Branches may start at different times (workers become ready at
    different moments); the combined transfer to the destination starts
    when the last branch has fully landed on the switch.
    """

    _counter = 0

    def __init__(self, sim: Simulator, srcs, dst, size, tag=None,
                 charged=True, on_delivered=None, switch: str | None = None,
                 expected: int | None = None):
        if size <= 0:
            raise ValidationError("aggregation size must be > 0")
        self.sim = sim
        self.dst = dst
        self.size = float(size)
        self.tag = tag
        self.charged = charged
        self.on_delivered = on_delivered
        self.expected = expected if expected is not None else len(srcs)
        if self.expected < 1:
            raise ValidationError("aggregation needs at least one source")
        self._landed = 0
        if switch is None:
            AggGroup._counter += 1
            switch = f"switch_agg{AggGroup._counter}"
        if not sim.has_node(switch):
            sim.add_switch(switch)
        self.switch = switch

    def start_branch(self, src: str):
        """Launch one source's payload toward the switch (callable at any
        simulated time)."""
        self.sim.start_unicast(src, self.switch, self.size, tag=self.tag,
                               on_delivered=self._branch_landed)

    def branch_landed(self):
        """Record a branch whose transfer was managed by the caller."""
        self._branch_landed(None, self.switch)

    def _branch_landed(self, _flow, _dst):
        self._landed += 1
        if self._landed > self.expected:
            raise InternalError("aggregation branch count overflow")
        if self._landed == self.expected:
            self._emit()

    def _emit(self):
        sim = self.sim
        sim.log(self.switch, "aggregate", _tag_str(self.tag),
                f"branches={self.expected}")
        if self.charged:
            sim.start_unicast(self.switch, self.dst, self.size, tag=self.tag,
                              on_delivered=self._delivered)
        else:
            # Zero-cost forwarding: bits still traverse the final hop.
            sim.link_bits[(self.switch, OUT)] += self.size
            sim.link_bits[(self.dst, IN)] += self.size
            sim.after(sim.latency, self._free_deliver)

    def _free_deliver(self):
        self.sim.log(self.dst, "deliver", _tag_str(self.tag),
                     f"from={self.switch}")
        if self.on_delivered is not None:
            self.on_delivered(None, self.dst)

    def _delivered(self, flow, dst):
        if self.on_delivered is not None:
            self.on_delivered(flow, dst)


class SendQueue:
    """Per-node FIFO egress: one transfer in flight at a time.

    The next queued transfer starts when the current one's last bit leaves
    the node, which is what serializes parameter sends and produces the
    receive-time skew between workers.
    """

    def __init__(self, sim: Simulator, node: str):
        self.sim = sim
        self.node = node
        self._pending: list = []
        self._busy = False

    def submit(self, start_fn: Callable[[Callable], None]):
        """start_fn(release) must begin a transfer and call release() when
        its transmission completes."""
        self._pending.append(start_fn)
        if not self._busy:
            self._launch_next()

    def submit_unicast(self, dst, size, tag=None, on_delivered=None):
        def start(release):
            self.sim.start_unicast(
                self.node, dst, size, tag=tag,
                on_complete=lambda _f: release(),
                on_delivered=on_delivered,
            )
        self.submit(start)

    def submit_multicast(self, dsts, size, tag=None, on_delivered=None):
        def start(release):
            self.sim.start_multicast(
                self.node, dsts, size, tag=tag,
                on_complete=lambda _f: release(),
                on_delivered=on_delivered,
            )
        self.submit(start)

    def _launch_next(self):
        if not self._pending:
            self._busy = False
            return
        self._busy = True
        start_fn = self._pending.pop(0)
        start_fn(self._release)

    def _release(self):
        self._launch_next()


class Barrier:
    """Counting barrier: fires once all members have signalled."""

    def __init__(self, sim: Simulator, members: int, on_release: Callable,
                 kind: str = "global"):
        if members < 1:
            raise ValidationError("barrier needs at least one member")
        self.sim = sim
        self.members = members
        self.kind = kind
        self.on_release = on_release
        self._signalled = 0

    def signal(self):
        self._signalled += 1
        if self._signalled > self.members:
            raise InternalError("barrier signalled more times than members")
        if self._signalled == self.members:
            self.sim.log("", "barrier_release", detail=self.kind)
            self.sim.after(0.0, self.on_release)


@dataclass(frozen=True)
class SimResult:
    """Outcome of one simulated scenario.

    timeline maps node name to (phase, start, end) spans; link_bits maps
    "node:direction" to total bits carried; event_log is the full ordered
    record when log collection was enabled.
    """

    iteration_time: float
    timeline: dict
    link_bits: dict
    event_log: tuple = ()

    def link(self, node: str, direction: str) -> float:
        return self.link_bits.get(f"{node}:{direction}", 0.0)

    def event_log_jsonl(self) -> str:
        import json

        out = []
        for e in self.event_log:
            out.append(json.dumps(
                {"t": e.t, "node": e.node, "kind": e.kind,
                 "param": e.param, "detail": e.detail},
                sort_keys=True))
        return "\n".join(out) + ("\n" if out else "")


def finalize_links(link_bits: dict) -> dict:
    """Stringify link keys for SimResult (stable, JSON-friendly)."""
    return {f"{node}:{direction}": bits
            for (node, direction), bits in link_bits.items()}
