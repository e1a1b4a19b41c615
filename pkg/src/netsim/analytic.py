"""Closed-form iteration-time model for parameter-server training.

An iteration splits into two pipelined halves: distribution plus forward
pass (D), and backpropagation plus aggregation (A). Each half is the max of
its compute and its wire time; the iteration is D + A. With w workers and p
parameter servers on endpoint links of rate b, a full model copy per worker
gives each half a wire time of w*m/(p*b); multicast caps the distribution
side at m/(p*b) and in-network aggregation does the same for the
aggregation side.

These formulas intentionally ignore worker skew, per-layer pipelining and
uneven sharding; the event simulator handles those. The closed form is the
fast predictor and the cross-check oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError
from .trace import ModelProfile

MULTICAST = "multicast"
IN_NET_AGG = "in_net_agg"


@dataclass(frozen=True)
class AnalyticInputs:
    """Inputs to the closed-form model: sizes in bits, rates in bits/s."""

    m: float
    w: int
    p: int
    b: float
    c_f: float
    c_b: float

    def __post_init__(self):
        if self.m <= 0 or self.b <= 0 or self.c_f <= 0 or self.c_b <= 0:
            raise ValidationError("m, b, c_f, c_b must all be > 0")
        if not isinstance(self.w, int) or self.w < 1:
            raise ValidationError("w must be an integer >= 1")
        if not isinstance(self.p, int) or self.p < 1:
            raise ValidationError("p must be an integer >= 1")


@dataclass(frozen=True)
class MechanismFlags:
    multicast: bool = False
    in_net_agg: bool = False


def step_times(inputs: AnalyticInputs,
               flags: MechanismFlags = MechanismFlags()) -> tuple[float, float]:
    """Return (D, A): the two pipelined halves of one iteration."""
    shard_wire = inputs.m / (inputs.p * inputs.b)
    t_d = shard_wire if flags.multicast else inputs.w * shard_wire
    t_a = shard_wire if flags.in_net_agg else inputs.w * shard_wire
    return max(inputs.c_f, t_d), max(inputs.c_b, t_a)


def iteration_time(inputs: AnalyticInputs,
                   flags: MechanismFlags = MechanismFlags()) -> float:
    d, a = step_times(inputs, flags)
    return d + a


def mechanism_threshold(inputs: AnalyticInputs, which: str) -> int:
    """Smallest worker count at which a mechanism starts to pay off.

    A mechanism pays off once its phase goes network-bound, i.e. the
    smallest w with w*m/(p*b) strictly greater than the phase's compute
    time (c_f for multicast, c_b for in-network aggregation). May be 1 when
    a single model copy already exceeds the compute time.
    """
    if which == MULTICAST:
        compute = inputs.c_f
    elif which == IN_NET_AGG:
        compute = inputs.c_b
    else:
        raise ValidationError(f"unknown mechanism {which!r}")
    shard_wire = inputs.m / (inputs.p * inputs.b)
    w = max(1, math.floor(compute / shard_wire) + 1)
    # Guard the float division against boundary rounding.
    while w > 1 and (w - 1) * shard_wire > compute:
        w -= 1
    while w * shard_wire <= compute:
        w += 1
    return w


def speedup_curve(inputs: AnalyticInputs, flags: MechanismFlags,
                  w_range) -> list[tuple[int, float]]:
    """Speedup of the flagged configuration over the no-mechanism baseline."""
    w_range = list(w_range)
    if not w_range:
        raise ValidationError("w_range must be nonempty")
    points = []
    for w in w_range:
        at_w = AnalyticInputs(m=inputs.m, w=int(w), p=inputs.p, b=inputs.b,
                              c_f=inputs.c_f, c_b=inputs.c_b)
        base = iteration_time(at_w, MechanismFlags())
        accel = iteration_time(at_w, flags)
        points.append((int(w), base / accel))
    return points


def ring_overhead(max_param: float, workers: int, b: float) -> float:
    """Wire time of the serial hop chain for the largest parameter.

    Without messaging, the biggest parameter crosses W-1 reduce hops and
    W-1 redistribution hops back to back, so it alone costs
    2*(W-1)*max_param/b.
    """
    if workers < 2:
        raise ValidationError("ring requires at least 2 workers")
    if max_param < 0 or b <= 0:
        raise ValidationError("max_param must be >= 0 and b > 0")
    return 2.0 * (workers - 1) * max_param / b


def second_ring_overhead(m: float, workers: int, b: float,
                         multicast: bool = False) -> float:
    """Wire time of the redistribution ring, with or without multicast.

    The plain second ring moves m*(W-1)/W bits through each worker link;
    replacing it with multicast costs a full m/b because the receiving side
    still has to take almost the whole model either way.
    """
    if workers < 2:
        raise ValidationError("ring requires at least 2 workers")
    if m <= 0 or b <= 0:
        raise ValidationError("m and b must be > 0")
    if multicast:
        return m / b
    return m * (workers - 1) / (workers * b)


def block_matches_agg(profile: ModelProfile, b: float) -> bool:
    """Whether block distribution should track in-network aggregation.

    True when the first backprop step plus one model wire time exceeds the
    whole backprop compute, i.e. for models with a dominant last layer and
    meaningful transfer times.
    """
    if b <= 0:
        raise ValidationError("b must be > 0")
    return profile.b1 + profile.m / b > profile.c_b


def stagger_hurts(d_delay: float, b_full: float, c_first: float) -> bool:
    """Whether removing backprop stagger would give performance back.

    d_delay is the gap between worker backprop start times, b_full the full
    backprop span including network time, c_first the compute of the first
    backprop step. Only a stagger larger than b_full - c_first costs
    anything end to end.
    """
    if d_delay < 0 or b_full < 0 or c_first < 0:
        raise ValidationError("stagger inputs must be >= 0")
    return d_delay > b_full - c_first
