"""Brute-force reference for the fluid network model.

This marches simulated time forward in small fixed steps, recomputing fair
rates from scratch at every step with a bottleneck-first allocation (a
different algorithm and data layout than the engine's progressive filling).
When a transfer crosses zero inside a step the march rewinds to the exact
crossing, so results are insensitive to the step size; halving dt must not
change anything beyond float noise. It exists purely to cross-check the
engine and shares no code with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError

OUT = "out"
IN = "in"


@dataclass(frozen=True)
class Unicast:
    job: str
    start: float
    src: str
    dst: str
    size: float


@dataclass(frozen=True)
class Multicast:
    job: str
    start: float
    src: str
    dsts: tuple
    size: float


@dataclass(frozen=True)
class Aggregation:
    job: str
    dst: str
    size: float
    branches: tuple  # of (src, start_time)
    charged: bool = True


@dataclass(frozen=True)
class Instance:
    """A bag of transfers over named endpoints of equal link rate."""

    nodes: tuple
    rate: float
    jobs: tuple
    latency: float = 0.0


class _Leg:
    __slots__ = ("uses", "remaining", "rate", "done_cb")

    def __init__(self, uses, size, done_cb):
        self.uses = uses
        self.remaining = float(size)
        self.rate = 0.0
        self.done_cb = done_cb


def _fair_rates(legs, caps):
    """Bottleneck-first max-min: repeatedly find the resource with the
    smallest fair share, pin its users there, deduct, repeat."""
    rates = [0.0] * len(legs)
    unassigned = list(range(len(legs)))
    avail = dict(caps)
    while unassigned:
        counts = {}
        for i in unassigned:
            for r in legs[i].uses:
                counts[r] = counts.get(r, 0) + 1
        best_r, best_share = None, math.inf
        for r, n in counts.items():
            if not math.isfinite(avail[r]):
                continue
            share = avail[r] / n
            if share < best_share:
                best_r, best_share = r, share
        if best_r is None:
            raise ValidationError("oracle: leg without finite constraint")
        pinned = [i for i in unassigned if best_r in legs[i].uses]
        for i in pinned:
            rates[i] = best_share
            for r in legs[i].uses:
                if math.isfinite(avail[r]):
                    avail[r] -= best_share
        unassigned = [i for i in unassigned if i not in pinned]
    for i, leg in enumerate(legs):
        leg.rate = rates[i]


def run_instance(instance: Instance, dt: float = 0.01) -> dict:
    """Return {job: final completion time} for every job in the instance.

    Completion means the last delivery of the job: the (single) delivery
    time for unicast and multicast, the forwarded payload's delivery for
    aggregation.
    """
    caps = {}
    for n in instance.nodes:
        caps[(n, OUT)] = instance.rate
        caps[(n, IN)] = instance.rate
    lat = instance.latency

    completions: dict = {}
    # (activation_time, ordinal, leg) — ordinal keeps ordering deterministic
    pending: list = []
    ordinal = 0

    def add_pending(t, leg):
        nonlocal ordinal
        ordinal += 1
        pending.append((t, ordinal, leg))

    for job in instance.jobs:
        if isinstance(job, Unicast):
            uses = ((job.src, OUT), (job.dst, IN))

            def done(t, j=job):
                completions[j.job] = t + lat

            add_pending(job.start, _Leg(uses, job.size, done))
        elif isinstance(job, Multicast):
            uses = ((job.src, OUT),) + tuple((d, IN) for d in job.dsts)

            def done(t, j=job):
                completions[j.job] = t + lat

            add_pending(job.start, _Leg(uses, job.size, done))
        elif isinstance(job, Aggregation):
            sw = f"oracle_sw_{job.job}"
            caps[(sw, OUT)] = math.inf
            caps[(sw, IN)] = math.inf
            state = {"left": len(job.branches)}

            def emit_done(t, j=job):
                completions[j.job] = t + lat

            def branch_done(t, j=job, s=state, sw=sw, done=emit_done):
                s["left"] -= 1
                if s["left"] == 0:
                    if j.charged:
                        add_pending(t + lat,
                                    _Leg(((sw, OUT), (j.dst, IN)), j.size,
                                         done))
                    else:
                        completions[j.job] = t + 2 * lat

            for src, start in job.branches:
                add_pending(start,
                            _Leg(((src, OUT), (sw, IN)), job.size, branch_done))
        else:
            raise ValidationError(f"unknown oracle job {job!r}")

    active: list = []
    t = 0.0
    guard = 0
    while pending or active:
        guard += 1
        if guard > 10_000_000:
            raise ValidationError("oracle failed to terminate")
        # Admit every leg whose activation time has arrived.
        pending.sort(key=lambda item: (item[0], item[1]))
        slack = 1e-12 * (1.0 + abs(t))
        while pending and pending[0][0] <= t + slack:
            active.append(pending.pop(0)[2])
        if not active:
            t = pending[0][0]
            continue
        _fair_rates(active, caps)
        # March one step, but never across an activation or a crossing.
        cross = min(leg.remaining / leg.rate for leg in active)
        step = min(dt, cross)
        if pending:
            step = min(step, pending[0][0] - t)
        if step < 0.0:
            step = 0.0
        t += step
        still = []
        for leg in active:
            leg.remaining -= leg.rate * step
            if leg.remaining <= max(leg.rate, 1.0) * 1e-12:
                leg.done_cb(t)
            else:
                still.append(leg)
        active = still
    return completions
