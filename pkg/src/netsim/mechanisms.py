"""Mechanism-level iteration simulators.

Three ways to run one synchronous data-parallel training iteration over the
fluid network engine:

* parameter server -- distribution, pipelined forward pass, backprop,
  pipelined aggregation; optional multicast distribution, in-network
  aggregation, block vs round-robin send order, parameter-to-server
  assignment heuristics, message pipelining and global-barrier removal
* ring reduce     -- per-parameter (or per-chunk) reduce ring followed by a
  redistribution ring, fully pipelined, optionally multicasting the second
  ring
* butterfly       -- log2(W) pairwise full-model exchange rounds, pipelined
  per parameter

Workers send each queued payload through a FIFO egress (one transfer in
flight at a time), so parameter-server round-robin distribution serializes
the per-worker copies of each parameter; the resulting skew in backprop
start times is emergent, never configured.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .engine import IN, OUT, SendQueue, Simulator, SimResult, finalize_links
from .errors import ValidationError
from .trace import ModelProfile

DISTRIBUTION_ORDERS = ("round_robin", "block")
ASSIGNMENTS = ("tf_round_robin", "balanced_bytes", "even_split")


@dataclass(frozen=True)
class ClusterConfig:
    """Cluster shape: counts, per-endpoint link rate, compute variance."""

    workers: int
    parameter_servers: int
    bandwidth: float
    latency: float = 0.0
    variance_sigma: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class PsOptions:
    """Parameter-server mechanism configuration."""

    multicast: bool = False
    in_net_agg: bool = False
    distribution_order: str = "round_robin"
    assignment: str = "tf_round_robin"
    message_bits: float | None = None
    global_barrier: bool = True

    def __post_init__(self):
        if self.distribution_order not in DISTRIBUTION_ORDERS:
            raise ValidationError(
                f"unknown distribution_order {self.distribution_order!r}")
        if self.assignment not in ASSIGNMENTS:
            raise ValidationError(f"unknown assignment {self.assignment!r}")
        if self.message_bits is not None and self.message_bits <= 0:
            raise ValidationError("message_bits must be > 0 when set")


@dataclass(frozen=True)
class RingOptions:
    """Ring-reduce configuration. messaging splits every parameter into W
    equal chunks owned round-robin, which balances per-link load."""

    messaging: bool = False
    multicast_second_ring: bool = False


@dataclass(frozen=True)
class ButterflyOptions:
    """Butterfly mixing has no knobs; worker count must be a power of two."""


Mechanism = PsOptions | RingOptions | ButterflyOptions


@dataclass(frozen=True)
class Scenario:
    profile: ModelProfile
    cluster: ClusterConfig
    mechanism: Mechanism


def validate_scenario(scenario: Scenario):
    """Raise ValidationError listing every violation at once."""
    problems = []
    c = scenario.cluster
    if not isinstance(c.workers, int) or c.workers < 1:
        problems.append(f"workers must be an integer >= 1, got {c.workers}")
    if not isinstance(c.parameter_servers, int) or c.parameter_servers < 0:
        problems.append(
            f"parameter_servers must be an integer >= 0, got {c.parameter_servers}")
    if c.bandwidth <= 0:
        problems.append(f"bandwidth must be > 0, got {c.bandwidth}")
    if c.latency < 0:
        problems.append(f"latency must be >= 0, got {c.latency}")
    if c.variance_sigma < 0:
        problems.append(f"variance_sigma must be >= 0, got {c.variance_sigma}")
    m = scenario.mechanism
    if isinstance(m, PsOptions):
        if c.parameter_servers < 1:
            problems.append("parameter-server mechanism needs parameter_servers >= 1")
    elif isinstance(m, RingOptions):
        if isinstance(c.workers, int) and c.workers < 2:
            problems.append("ring-reduce needs at least 2 workers")
    elif isinstance(m, ButterflyOptions):
        if isinstance(c.workers, int) and (
                c.workers < 1 or c.workers & (c.workers - 1) != 0):
            problems.append(
                f"butterfly mixing needs a power-of-two worker count, got {c.workers}")
    else:
        problems.append(f"unknown mechanism {m!r}")
    if problems:
        raise ValidationError("; ".join(problems))


def assign_params(profile: ModelProfile, servers: int,
                  heuristic: str = "tf_round_robin") -> list:
    """Map each parameter to server shares: a list per parameter of
    (server index, bits) fragments.

    tf_round_robin assigns whole parameters by index modulo P;
    balanced_bytes assigns largest-first to the least-loaded server;
    even_split fragments every parameter into P equal-byte pieces.
    """
    if servers < 1:
        raise ValidationError("need at least one parameter server")
    if heuristic not in ASSIGNMENTS:
        raise ValidationError(f"unknown assignment heuristic {heuristic!r}")
    n = len(profile.params)
    if heuristic == "tf_round_robin":
        return [[(p % servers, profile.params[p].size)] for p in range(n)]
    if heuristic == "even_split":
        return [[(j, profile.params[p].size / servers) for j in range(servers)]
                for p in range(n)]
    order = sorted(range(n), key=lambda p: (-profile.params[p].size, p))
    loads = [0.0] * servers
    frags: list = [None] * n
    for p in order:
        j = min(range(servers), key=lambda s: (loads[s], s))
        frags[p] = [(j, profile.params[p].size)]
        loads[j] += profile.params[p].size
    return frags


def _chunk_sizes(bits: float, message_bits: float | None) -> list[float]:
    if message_bits is None or bits <= message_bits:
        return [bits]
    pieces = math.ceil(bits / message_bits)
    return [bits / pieces] * pieces


def _variance_multipliers(cluster: ClusterConfig, iterations: int) -> dict:
    """Per-(worker, iteration) compute multiplier, drawn once up front so
    results do not depend on event interleave."""
    out = {}
    if cluster.variance_sigma <= 0.0:
        for k in range(iterations):
            for w in range(cluster.workers):
                out[(w, k)] = 1.0
        return out
    rng = random.Random(cluster.seed)
    for k in range(iterations):
        for w in range(cluster.workers):
            out[(w, k)] = rng.lognormvariate(0.0, cluster.variance_sigma)
    return out


# --------------------------------------------------------------------------
# Parameter server
# --------------------------------------------------------------------------

class _PsRun:
    def __init__(self, scenario: Scenario, charged_switch: bool,
                 iterations: int, collect_log: bool):
        self.profile = scenario.profile
        self.params = scenario.profile.params
        self.n = len(self.params)
        self.cluster = scenario.cluster
        self.opts: PsOptions = scenario.mechanism
        self.W = scenario.cluster.workers
        self.P = scenario.cluster.parameter_servers
        self.K = iterations
        # Aggregating a single worker's update is a no-op; keep the result
        # bit-identical to the baseline in that case.
        self.agg = self.opts.in_net_agg and self.W >= 2
        self.charged = charged_switch

        sim = Simulator(latency=self.cluster.latency, collect_log=collect_log)
        self.sim = sim
        b = self.cluster.bandwidth
        self.workers = [f"worker{i}" for i in range(self.W)]
        self.pses = [f"ps{j}" for j in range(self.P)]
        for name in self.workers + self.pses:
            sim.add_node(name, b, b)
        self.worker_q = [SendQueue(sim, w) for w in self.workers]
        self.ps_q = [SendQueue(sim, s) for s in self.pses]
        self.switches = []
        self.switch_q = []
        if self.agg:
            self.switches = [f"switch{j}" for j in range(self.P)]
            for name in self.switches:
                sim.add_switch(name)
            self.switch_q = [SendQueue(sim, s) for s in self.switches]

        self.frags = assign_params(self.profile, self.P, self.opts.assignment)
        self.frag_chunks = {}
        for p in range(self.n):
            for j, bits in self.frags[p]:
                self.frag_chunks[(p, j)] = _chunk_sizes(bits, self.opts.message_bits)
        self.ps_params = [[] for _ in range(self.P)]
        for p in range(self.n):
            for j, _bits in self.frags[p]:
                self.ps_params[j].append(p)
        self.active_pses = [j for j in range(self.P) if self.ps_params[j]]

        self.chunks_per_param = [
            sum(len(self.frag_chunks[(p, j)]) for j, _ in self.frags[p])
            for p in range(self.n)
        ]
        self.var = _variance_multipliers(self.cluster, iterations)

        # Mutable per-iteration state, keyed as described inline.
        self.recv_left = {}     # (w, k) -> [outstanding chunks] per param
        self.have = {}          # (w, k) -> [bool] per param
        self.model_recv = {}    # (w, k) -> time
        self.fwd_running = {}   # (w, k) -> bool
        self.fwd_next = {}      # (w, k) -> next layer index
        self.fwd_start = {}     # (w, k) -> time of first layer start
        self.bp_start = {}      # (w, k) -> time
        self.bp_done = {}       # (w, k) -> time
        self.grad_time = {}     # (w, k, p) -> time
        self.send_started = {}  # (w, k) -> time of first update enqueue
        self.pp_left = {}       # (k, j, p) -> outstanding update units
        self.ps_left = {}       # (k, j) -> outstanding update units
        self.ps_first_upd = {}  # (k, j) -> time
        self.ps_done = {}       # (k, j) -> time
        self.param_left = {}    # (k, p) -> owning servers outstanding
        self.agg_left = {}      # (k, p, j, chunk) -> branches outstanding
        self.agg_done = {}      # (k, p) -> time param fully aggregated
        self.iter_start = {}    # k -> time distribution began
        self.iter_end = {}      # k -> time all updates landed
        self.ps_done_count = {}  # k -> servers still outstanding
        self._inited: set = set()
        self._widx = {name: i for i, name in enumerate(self.workers)}

    # -- setup per iteration ------------------------------------------------

    def _ensure_iter(self, k: int):
        if k in self._inited:
            return
        self._inited.add(k)
        for w in range(self.W):
            self.recv_left[(w, k)] = list(self.chunks_per_param)
            self.have[(w, k)] = [False] * self.n
            self.fwd_running[(w, k)] = False
            self.fwd_next[(w, k)] = 0
        self.ps_done_count[k] = len(self.active_pses)
        for j in self.active_pses:
            total = 0
            for p in self.ps_params[j]:
                units = len(self.frag_chunks[(p, j)])
                if not self.agg:
                    units *= self.W
                self.pp_left[(k, j, p)] = units
                total += units
            self.ps_left[(k, j)] = total
        for p in range(self.n):
            self.param_left[(k, p)] = len(self.frags[p])

    # -- distribution -------------------------------------------------------

    def _enqueue_dist(self, k: int, j: int, params: list[int]):
        if k not in self.iter_start:
            self.iter_start[k] = self.sim.now
        opts = self.opts
        queue = self.ps_q[j]
        if opts.multicast:
            for p in params:
                for ci, cbits in enumerate(self.frag_chunks[(p, j)]):
                    queue.submit_multicast(
                        self.workers, cbits,
                        tag=(self.params[p].name, f"dist{k}"),
                        on_delivered=self._make_chunk_cb(k, p))
        elif opts.distribution_order == "round_robin":
            # One parameter goes to one worker at a time; message chunks of
            # the same copy stay back to back so chunking alone does not
            # erase the receive-time skew between workers.
            for p in params:
                for w in range(self.W):
                    for ci, cbits in enumerate(self.frag_chunks[(p, j)]):
                        queue.submit_unicast(
                            self.workers[w], cbits,
                            tag=(self.params[p].name, f"dist{k}"),
                            on_delivered=self._make_chunk_cb(k, p))
        else:  # block: the full shard to one worker at a time
            for w in range(self.W):
                for p in params:
                    for ci, cbits in enumerate(self.frag_chunks[(p, j)]):
                        queue.submit_unicast(
                            self.workers[w], cbits,
                            tag=(self.params[p].name, f"dist{k}"),
                            on_delivered=self._make_chunk_cb(k, p))

    def _make_chunk_cb(self, k: int, p: int):
        def cb(_flow, dst):
            self._on_param_chunk(self._widx[dst], k, p)
        return cb

    def _on_param_chunk(self, w: int, k: int, p: int):
        left = self.recv_left[(w, k)]
        left[p] -= 1
        if left[p] > 0:
            return
        self.have[(w, k)][p] = True
        self.sim.log(self.workers[w], "recv_param", self.params[p].name, f"it={k}")
        if all(self.have[(w, k)]):
            self.model_recv[(w, k)] = self.sim.now
        self._try_fwd(w, k)

    # -- compute ------------------------------------------------------------

    def _try_fwd(self, w: int, k: int):
        if (w, k) not in self.fwd_next:
            return
        if self.fwd_running[(w, k)]:
            return
        i = self.fwd_next[(w, k)]
        if i >= self.n or not self.have[(w, k)][i]:
            return
        if i == 0 and k > 0 and (w, k - 1) not in self.bp_done:
            return
        if i == 0:
            self.fwd_start[(w, k)] = self.sim.now
        self.fwd_running[(w, k)] = True
        dur = self.params[i].fp_compute * self.var[(w, k)]
        self.sim.after(dur, self._fwd_done, w, k, i)

    def _fwd_done(self, w: int, k: int, i: int):
        self.fwd_running[(w, k)] = False
        self.fwd_next[(w, k)] = i + 1
        if i == self.n - 1:
            # Local barrier: the forward pass is complete, backprop starts.
            now = self.sim.now
            self.bp_start[(w, k)] = now
            self.sim.log(self.workers[w], "bp_start", detail=f"it={k}")
            t = 0.0
            for p in range(self.n - 1, -1, -1):
                t += self.params[p].bp_compute * self.var[(w, k)]
                self.sim.at(now + t, self._grad_ready, w, k, p)
        else:
            self._try_fwd(w, k)

    def _grad_ready(self, w: int, k: int, p: int):
        now = self.sim.now
        self.grad_time[(w, k, p)] = now
        self.sim.log(self.workers[w], "grad_ready", self.params[p].name, f"it={k}")
        self.send_started.setdefault((w, k), now)
        if p == 0:
            self.bp_done[(w, k)] = now
            self.sim.log(self.workers[w], "bp_done", detail=f"it={k}")
            if k + 1 < self.K:
                self._try_fwd(w, k + 1)
        tag_it = f"agg{k}"
        for j, _bits in self.frags[p]:
            for ci, cbits in enumerate(self.frag_chunks[(p, j)]):
                if self.agg:
                    self._send_branch(w, k, p, j, ci, cbits, tag_it)
                else:
                    self.worker_q[w].submit_unicast(
                        self.pses[j], cbits,
                        tag=(self.params[p].name, tag_it),
                        on_delivered=self._make_update_cb(j, k, p))

    # -- aggregation --------------------------------------------------------

    def _send_branch(self, w, k, p, j, ci, cbits, tag_it):
        key = (k, p, j, ci)
        if key not in self.agg_left:
            self.agg_left[key] = self.W

        def landed(_flow, _dst):
            self.agg_left[key] -= 1
            if self.agg_left[key] == 0:
                self._emit(k, p, j, ci, cbits, tag_it)

        self.worker_q[w].submit_unicast(
            self.switches[j], cbits,
            tag=(self.params[p].name, tag_it), on_delivered=landed)

    def _emit(self, k, p, j, ci, cbits, tag_it):
        sim = self.sim
        name = self.params[p].name
        sim.log(self.switches[j], "aggregate", name, f"it={k} chunk={ci}")
        if self.charged:
            self.switch_q[j].submit_unicast(
                self.pses[j], cbits, tag=(name, tag_it),
                on_delivered=self._make_update_cb(j, k, p))
        else:
            # Zero-cost forwarding hop: bits still counted on both links.
            sim.link_bits[(self.switches[j], OUT)] += cbits
            sim.link_bits[(self.pses[j], IN)] += cbits
            cb = self._make_update_cb(j, k, p)
            sim.after(sim.latency, self._free_deliver, j, cb, name)

    def _free_deliver(self, j, cb, name):
        self.sim.log(self.pses[j], "deliver", name, f"from={self.switches[j]}")
        cb(None, self.pses[j])

    def _make_update_cb(self, j: int, k: int, p: int):
        def cb(_flow, _dst):
            self._on_update(j, k, p)
        return cb

    def _on_update(self, j: int, k: int, p: int):
        now = self.sim.now
        self.ps_first_upd.setdefault((k, j), now)
        self.pp_left[(k, j, p)] -= 1
        if self.pp_left[(k, j, p)] == 0:
            self.sim.log(self.pses[j], "shard_aggregated",
                         self.params[p].name, f"it={k}")
            self.param_left[(k, p)] -= 1
            if self.param_left[(k, p)] == 0:
                self.agg_done[(k, p)] = now
                self.sim.log(self.pses[j], "param_aggregated",
                             self.params[p].name, f"it={k}")
            if not self.opts.global_barrier and k + 1 < self.K:
                self._ensure_iter(k + 1)
                self._enqueue_dist(k + 1, j, [p])
        self.ps_left[(k, j)] -= 1
        if self.ps_left[(k, j)] == 0:
            self.ps_done[(k, j)] = now
            self.sim.log(self.pses[j], "ps_done", detail=f"it={k}")
            self.ps_done_count[k] -= 1
            if self.ps_done_count[k] == 0:
                self.iter_end[k] = now
                self.sim.log("", "iteration_done", detail=f"it={k}")
                if self.opts.global_barrier and k + 1 < self.K:
                    self._ensure_iter(k + 1)
                    for nj in self.active_pses:
                        self._enqueue_dist(k + 1, nj, self.ps_params[nj])

    # -- driver ---------------------------------------------------------------

    def run(self) -> SimResult:
        self._ensure_iter(0)
        for j in self.active_pses:
            self._enqueue_dist(0, j, self.ps_params[j])
        self.sim.run()
        if (self.K - 1) not in self.iter_end:
            raise ValidationError("simulation ended before all updates landed")
        return self._result()

    def _result(self) -> SimResult:
        timeline: dict = {}

        def mark(node, phase, start, end):
            timeline.setdefault(node, []).append((phase, start, end))

        for k in range(self.K):
            suffix = "" if self.K == 1 else f"#{k}"
            for w in range(self.W):
                node = self.workers[w]
                if (w, k) in self.model_recv:
                    mark(node, "distribution" + suffix,
                         self.iter_start.get(k, 0.0), self.model_recv[(w, k)])
                if (w, k) in self.fwd_start and (w, k) in self.bp_start:
                    mark(node, "forward" + suffix,
                         self.fwd_start[(w, k)], self.bp_start[(w, k)])
                if (w, k) in self.bp_start and (w, k) in self.bp_done:
                    mark(node, "backprop" + suffix,
                         self.bp_start[(w, k)], self.bp_done[(w, k)])
            for j in self.active_pses:
                node = self.pses[j]
                if (k, j) in self.ps_first_upd and (k, j) in self.ps_done:
                    mark(node, "aggregation" + suffix,
                         self.ps_first_upd[(k, j)], self.ps_done[(k, j)])
        return SimResult(
            iteration_time=self.iter_end[self.K - 1],
            timeline=timeline,
            link_bits=finalize_links(self.sim.link_bits),
            event_log=tuple(self.sim.event_log),
        )


def simulate_ps(scenario: Scenario, *, agg_switch_charged: bool = True,
                iterations: int = 1, collect_log: bool = True) -> SimResult:
    """One or more parameter-server iterations; see module docstring."""
    validate_scenario(scenario)
    if not isinstance(scenario.mechanism, PsOptions):
        raise ValidationError("scenario mechanism is not parameter-server")
    run = _PsRun(scenario, agg_switch_charged, iterations, collect_log)
    return run.run()


def measure_steady_state(scenario: Scenario, iterations: int = 3, *,
                         agg_switch_charged: bool = True) -> float:
    """Per-iteration time once cross-iteration pipelining has settled.

    Runs the requested number of chained iterations and anchors on the
    model's first parameter: the span between that parameter being fully
    aggregated in the first and in the last iteration, divided by the
    number of iteration boundaries in between. Without the global barrier
    each server forwards a parameter's next-iteration copy as soon as that
    parameter has aggregated, letting phases overlap across iterations.
    """
    if not isinstance(scenario.mechanism, PsOptions):
        raise ValidationError(
            "steady-state measurement is only defined for the parameter-server "
            "mechanism")
    if iterations < 3:
        raise ValidationError("steady-state measurement needs >= 3 iterations")
    validate_scenario(scenario)
    run = _PsRun(scenario, agg_switch_charged, iterations, collect_log=False)
    run.run()
    t_a = run.agg_done.get((0, 0))
    t_b = run.agg_done.get((iterations - 1, 0))
    if t_a is None or t_b is None:
        raise ValidationError("anchor parameter never aggregated")
    return (t_b - t_a) / (iterations - 1)


# --------------------------------------------------------------------------
# Ring reduce
# --------------------------------------------------------------------------

class _Unit:
    """One ring payload: a whole parameter, or one of its W chunks."""

    __slots__ = ("idx", "p", "size", "owner", "gather_left", "done_at")

    def __init__(self, idx, p, size, owner):
        self.idx = idx
        self.p = p
        self.size = size
        self.owner = owner
        self.gather_left = 0
        self.done_at = None


class _RingRun:
    def __init__(self, scenario: Scenario, collect_log: bool):
        self.profile = scenario.profile
        self.params = scenario.profile.params
        self.n = len(self.params)
        self.cluster = scenario.cluster
        self.opts: RingOptions = scenario.mechanism
        self.W = scenario.cluster.workers

        sim = Simulator(latency=self.cluster.latency, collect_log=collect_log)
        self.sim = sim
        b = self.cluster.bandwidth
        self.workers = [f"worker{i}" for i in range(self.W)]
        for name in self.workers:
            sim.add_node(name, b, b)
        self.queues = [SendQueue(sim, w) for w in self.workers]

        self.units: list[_Unit] = []
        if self.opts.messaging:
            for p in range(self.n):
                size = self.params[p].size / self.W
                for c in range(self.W):
                    self.units.append(_Unit(len(self.units), p, size, c))
        else:
            for p in range(self.n):
                self.units.append(
                    _Unit(len(self.units), p, self.params[p].size, p % self.W))

        self.var = _variance_multipliers(self.cluster, 1)
        self.grad = {}          # (w, p) -> time
        self.waiting = {}       # (w, p) -> [(unit, hop)]
        self.by_owner = {}      # w -> [units]
        for u in self.units:
            self.by_owner.setdefault(u.owner, []).append(u)
        self.units_left = len(self.units)
        self.end = 0.0
        self.bp_start_t = None
        self.marks = {}

    def run(self) -> SimResult:
        from .engine import Barrier

        barrier = Barrier(self.sim, self.W, self._bp_all, kind="global")
        for w in range(self.W):
            dur = self.profile.c_f * self.var[(w, 0)]
            self.marks[("fwd_done", w)] = dur
            self.sim.at(dur, self._fwd_done, w, barrier)
        self.sim.run()
        if self.units_left:
            raise ValidationError("ring simulation ended with undelivered units")
        iteration = max(self.end,
                        max(self.grad.values()) if self.grad else 0.0)
        timeline = {}
        for w in range(self.W):
            node = self.workers[w]
            timeline[node] = [("forward", 0.0, self.marks[("fwd_done", w)]),
                              ("backprop", self.bp_start_t,
                               self.marks.get(("bp_done", w), self.bp_start_t))]
        return SimResult(
            iteration_time=iteration,
            timeline=timeline,
            link_bits=finalize_links(self.sim.link_bits),
            event_log=tuple(self.sim.event_log),
        )

    def _fwd_done(self, w: int, barrier):
        self.sim.log(self.workers[w], "fwd_done")
        barrier.signal()

    def _bp_all(self):
        # Backprop starts simultaneously on every worker.
        now = self.sim.now
        self.bp_start_t = now
        for w in range(self.W):
            t = 0.0
            for p in range(self.n - 1, -1, -1):
                t += self.params[p].bp_compute * self.var[(w, 0)]
                self.sim.at(now + t, self._grad_ready, w, p)

    def _grad_ready(self, w: int, p: int):
        now = self.sim.now
        self.grad[(w, p)] = now
        self.sim.log(self.workers[w], "grad_ready", self.params[p].name)
        if p == 0:
            self.marks[("bp_done", w)] = now
        for u in self.by_owner.get(w, []):
            if u.p == p:
                self._launch_hop(u, 1)
        for u, hop in self.waiting.pop((w, p), []):
            self._launch_hop(u, hop)

    def _launch_hop(self, u: _Unit, hop: int):
        sender = (u.owner + hop - 1) % self.W
        dst = (sender + 1) % self.W
        self.queues[sender].submit_unicast(
            self.workers[dst], u.size,
            tag=(self.params[u.p].name, f"reduce{hop}", f"u{u.idx}"),
            on_delivered=lambda _f, _d, u=u, hop=hop: self._reduce_arrived(u, hop))

    def _reduce_arrived(self, u: _Unit, hop: int):
        if hop == self.W - 1:
            self._start_gather(u)
            return
        nxt = (u.owner + hop) % self.W
        # The next hop merges the partial with the local gradient; it
        # departs once both are present.
        if (nxt, u.p) in self.grad:
            self._launch_hop(u, hop + 1)
        else:
            self.waiting.setdefault((nxt, u.p), []).append((u, hop + 1))

    def _start_gather(self, u: _Unit):
        holder = (u.owner + self.W - 1) % self.W
        self.sim.log(self.workers[holder], "reduced", self.params[u.p].name,
                     f"u{u.idx}")
        u.gather_left = self.W - 1
        if self.opts.multicast_second_ring:
            dsts = [self.workers[i] for i in range(self.W) if i != holder]
            self.queues[holder].submit_multicast(
                dsts, u.size,
                tag=(self.params[u.p].name, "gather_mc", f"u{u.idx}"),
                on_delivered=lambda _f, _d, u=u: self._gather_arrived_mc(u))
        else:
            self._launch_gather(u, holder, 1)

    def _launch_gather(self, u: _Unit, holder: int, g: int):
        sender = (holder + g - 1) % self.W
        dst = (sender + 1) % self.W
        self.queues[sender].submit_unicast(
            self.workers[dst], u.size,
            tag=(self.params[u.p].name, f"gather{g}", f"u{u.idx}"),
            on_delivered=lambda _f, _d, u=u, holder=holder, g=g:
                self._gather_arrived(u, holder, g))

    def _gather_arrived(self, u: _Unit, holder: int, g: int):
        u.gather_left -= 1
        if u.gather_left == 0:
            self._unit_done(u)
        else:
            self._launch_gather(u, holder, g + 1)

    def _gather_arrived_mc(self, u: _Unit):
        u.gather_left -= 1
        if u.gather_left == 0:
            self._unit_done(u)

    def _unit_done(self, u: _Unit):
        u.done_at = self.sim.now
        self.sim.log("", "unit_done", self.params[u.p].name, f"u{u.idx}")
        self.end = max(self.end, u.done_at)
        self.units_left -= 1


def simulate_ring(scenario: Scenario, *, collect_log: bool = True) -> SimResult:
    """One ring-reduce iteration: forward pass, then pipelined reduce and
    redistribution rings."""
    validate_scenario(scenario)
    if not isinstance(scenario.mechanism, RingOptions):
        raise ValidationError("scenario mechanism is not ring-reduce")
    return _RingRun(scenario, collect_log).run()


# --------------------------------------------------------------------------
# Butterfly mixing
# --------------------------------------------------------------------------

class _BflyRun:
    def __init__(self, scenario: Scenario, collect_log: bool):
        self.profile = scenario.profile
        self.params = scenario.profile.params
        self.n = len(self.params)
        self.cluster = scenario.cluster
        self.W = scenario.cluster.workers
        self.rounds = self.W.bit_length() - 1  # log2(W)

        sim = Simulator(latency=self.cluster.latency, collect_log=collect_log)
        self.sim = sim
        b = self.cluster.bandwidth
        self.workers = [f"worker{i}" for i in range(self.W)]
        for name in self.workers:
            sim.add_node(name, b, b)
        self.queues = [SendQueue(sim, w) for w in self.workers]

        self.var = _variance_multipliers(self.cluster, 1)
        # A worker's level-r value mixes its level-(r-1) value with the
        # copy received in round r-1; each needs both pieces.
        self.left = {}
        for w in range(self.W):
            for p in range(self.n):
                self.left[(w, p, 0)] = 1
                for r in range(1, self.rounds + 1):
                    self.left[(w, p, r)] = 2
        self.done_left = self.W * self.n
        self.end = 0.0
        self.bp_done = {}

    def run(self) -> SimResult:
        for w in range(self.W):
            dur = self.profile.c_f * self.var[(w, 0)]
            self.sim.at(dur, self._bp_start, w)
        self.sim.run()
        if self.done_left:
            raise ValidationError("butterfly simulation ended incomplete")
        timeline = {}
        for w in range(self.W):
            node = self.workers[w]
            fwd_end = self.profile.c_f * self.var[(w, 0)]
            timeline[node] = [("forward", 0.0, fwd_end),
                              ("backprop", fwd_end,
                               self.bp_done.get(w, fwd_end))]
        return SimResult(
            iteration_time=self.end,
            timeline=timeline,
            link_bits=finalize_links(self.sim.link_bits),
            event_log=tuple(self.sim.event_log),
        )

    def _bp_start(self, w: int):
        now = self.sim.now
        self.sim.log(self.workers[w], "bp_start")
        t = 0.0
        for p in range(self.n - 1, -1, -1):
            t += self.params[p].bp_compute * self.var[(w, 0)]
            self.sim.at(now + t, self._grad_ready, w, p)

    def _grad_ready(self, w: int, p: int):
        self.sim.log(self.workers[w], "grad_ready", self.params[p].name)
        if p == 0:
            self.bp_done[w] = self.sim.now
        self._dec(w, p, 0)

    def _dec(self, w: int, p: int, r: int):
        self.left[(w, p, r)] -= 1
        if self.left[(w, p, r)] == 0:
            self._value_ready(w, p, r)

    def _value_ready(self, w: int, p: int, r: int):
        if r == self.rounds:
            self.done_left -= 1
            self.end = max(self.end, self.sim.now)
            return
        partner = w ^ (1 << r)
        self.queues[w].submit_unicast(
            self.workers[partner], self.params[p].size,
            tag=(self.params[p].name, f"round{r}"),
            on_delivered=lambda _f, _d, partner=partner, p=p, r=r:
                self._dec(partner, p, r + 1))
        # The local level-r value also feeds the next level's mix.
        self._dec(w, p, r + 1)


def simulate_butterfly(scenario: Scenario, *, collect_log: bool = True) -> SimResult:
    """One butterfly-mixing iteration: log2(W) pairwise exchange rounds."""
    validate_scenario(scenario)
    if not isinstance(scenario.mechanism, ButterflyOptions):
        raise ValidationError("scenario mechanism is not butterfly")
    return _BflyRun(scenario, collect_log).run()


def simulate(scenario: Scenario, *, agg_switch_charged: bool = True,
             iterations: int = 1, collect_log: bool = True) -> SimResult:
    """Run one scenario with the mechanism it carries."""
    mech = scenario.mechanism
    if isinstance(mech, PsOptions):
        return simulate_ps(scenario, agg_switch_charged=agg_switch_charged,
                           iterations=iterations, collect_log=collect_log)
    if iterations != 1:
        raise ValidationError(
            "multi-iteration runs are only defined for the parameter server")
    if isinstance(mech, RingOptions):
        return simulate_ring(scenario, collect_log=collect_log)
    if isinstance(mech, ButterflyOptions):
        return simulate_butterfly(scenario, collect_log=collect_log)
    raise ValidationError(f"unknown mechanism {mech!r}")
