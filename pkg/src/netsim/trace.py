"""Training traces and model profiles.

A trace is a CSV of timestamped send records collected from one training
iteration. A model profile is the ordered per-parameter view derived from
traces (or synthesized): sizes in bits plus the compute gap that precedes
each gradient becoming ready during backpropagation. The simulators consume
profiles, not raw traces.

Everything here is immutable; operations are pure functions, so values can
be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

from .errors import ParseError, ValidationError

TRACE_KINDS = ("distribution", "aggregation", "marker")
MARKER_PARAM = "__dependency__"
TRACE_HEADER = "t_s,param,size_bits,src,dst,kind"


@dataclass(frozen=True)
class TraceEvent:
    """One timestamped send record.

    Times are seconds relative to the start of the trace; sizes are bits.
    Marker events separate critical-path gradient sends from earlier
    bookkeeping sends and carry size 0.
    """

    t: float
    param: str
    size: float
    src: str
    dst: str
    kind: str

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")
        if not self.param:
            raise ValidationError("empty parameter name")
        if self.t < 0:
            raise ValidationError(f"negative event time {self.t}")
        if self.kind == "marker":
            if self.size != 0:
                raise ValidationError("marker events must have size 0")
        else:
            if self.size <= 0:
                raise ValidationError(f"non-positive size {self.size} for {self.param}")
            if self.src == self.dst:
                raise ValidationError(f"src == dst ({self.src}) for {self.param}")


@dataclass(frozen=True)
class TraceMeta:
    model: str = ""
    iteration: int = 0


@dataclass(frozen=True)
class Trace:
    """An ordered sequence of trace events plus provenance metadata."""

    events: tuple[TraceEvent, ...]
    meta: TraceMeta = TraceMeta()

    def __post_init__(self):
        for a, b in zip(self.events, self.events[1:]):
            if b.t < a.t:
                raise ValidationError("trace events not sorted by time")

    def __len__(self):
        return len(self.events)

    def params(self) -> tuple[str, ...]:
        """Distinct non-marker parameter names in first-occurrence order."""
        seen = dict.fromkeys(
            e.param for e in self.events if e.kind != "marker"
        )
        return tuple(seen)


class PartitionedTrace(NamedTuple):
    distribution: Trace
    aggregation: Trace


def parse_trace(text: bytes | str) -> Trace:
    """Parse the CSV trace format.

    Column order is ``t_s,param,size_bits,src,dst,kind``. A header line and
    a leading ``#meta,<model>,<iteration>`` comment are both optional.
    Events are returned sorted by (time, line order). Raises ParseError with
    the offending line number on malformed input.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines()
    meta = TraceMeta()
    events = []
    saw_data = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#meta,"):
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: bad meta comment")
            try:
                meta = TraceMeta(model=parts[1], iteration=int(parts[2]))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: bad meta comment: {exc}") from None
            continue
        if line.startswith("#"):
            continue
        if line == TRACE_HEADER:
            continue
        cols = line.split(",")
        if len(cols) != 6:
            raise ParseError(f"line {lineno}: expected 6 columns, got {len(cols)}")
        t_s, param, size_bits, src, dst, kind = cols
        try:
            event = TraceEvent(
                t=float(t_s), param=param, size=float(size_bits),
                src=src, dst=dst, kind=kind,
            )
        except (ValueError, ValidationError) as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        events.append(event)
        saw_data = True
    if not saw_data:
        raise ParseError("empty trace: no event lines found")
    events.sort(key=lambda e: e.t)  # stable: ties keep line order
    return Trace(events=tuple(events), meta=meta)


def serialize_trace(trace: Trace) -> str:
    """Inverse of parse_trace; parse(serialize(t)) == t field for field."""
    out = []
    if trace.meta != TraceMeta():
        out.append(f"#meta,{trace.meta.model},{trace.meta.iteration}")
    out.append(TRACE_HEADER)
    for e in trace.events:
        out.append(f"{e.t!r},{e.param},{e.size!r},{e.src},{e.dst},{e.kind}")
    return "\n".join(out) + "\n"


def partition_iteration(trace: Trace) -> PartitionedTrace:
    """Split one iteration's events around its single marker event.

    The distribution half keeps every distribution-kind event. The
    aggregation half keeps aggregation-kind events at or after the marker;
    aggregation sends that precede the marker are bookkeeping traffic that
    never sits on the critical path, so they are dropped.
    """
    markers = [e for e in trace.events if e.kind == "marker"]
    if len(markers) != 1:
        raise ValidationError(
            f"expected exactly one marker event, found {len(markers)}"
        )
    cut = markers[0].t
    dist = tuple(e for e in trace.events if e.kind == "distribution")
    agg = tuple(
        e for e in trace.events if e.kind == "aggregation" and e.t >= cut
    )
    return PartitionedTrace(
        distribution=Trace(events=dist, meta=trace.meta),
        aggregation=Trace(events=agg, meta=trace.meta),
    )


def normalize(trace: Trace) -> Trace:
    """Shift times so the first event lands at t=0."""
    if not trace.events:
        raise ValidationError("cannot normalize an empty trace")
    return rebase(trace, trace.events[0].t)


def rebase(trace: Trace, t0: float) -> Trace:
    """Shift times so the instant t0 becomes 0.

    Use this to anchor a partitioned aggregation trace on the marker time
    rather than on its first send, which keeps the first gradient's compute
    gap intact.
    """
    if trace.events and t0 > trace.events[0].t:
        raise ValidationError(
            f"rebase anchor {t0} is after the first event "
            f"({trace.events[0].t}); times would go negative")
    if t0 == 0.0:
        return trace
    shifted = tuple(replace(e, t=e.t - t0) for e in trace.events)
    return Trace(events=shifted, meta=trace.meta)


# --------------------------------------------------------------------------
# Model profiles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    """One parameter (layer) of a model.

    bp_compute is the gradient-compute gap that precedes this parameter's
    update becoming ready while backpropagation walks the model in reverse;
    fp_compute is this layer's share of the forward pass.
    """

    name: str
    size: float
    bp_compute: float = 0.0
    fp_compute: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValidationError("empty parameter name")
        if self.size <= 0:
            raise ValidationError(f"parameter {self.name}: size must be > 0")
        if self.bp_compute < 0 or self.fp_compute < 0:
            raise ValidationError(f"parameter {self.name}: negative compute time")


@dataclass(frozen=True)
class ModelProfile:
    """Ordered parameter list; index 0 is the first layer of the model."""

    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        if not self.params:
            raise ValidationError("profile must contain at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate parameter names in profile")

    @property
    def m(self) -> float:
        """Total model size in bits."""
        return math.fsum(p.size for p in self.params)

    @property
    def c_f(self) -> float:
        """Total forward-pass compute in seconds."""
        return math.fsum(p.fp_compute for p in self.params)

    @property
    def c_b(self) -> float:
        """Total backpropagation compute in seconds."""
        return math.fsum(p.bp_compute for p in self.params)

    @property
    def b1(self) -> float:
        """Compute for the first backprop step (the model's last parameter)."""
        return self.params[-1].bp_compute

    @property
    def max_param(self) -> float:
        return max(p.size for p in self.params)

    def __len__(self):
        return len(self.params)


def profile_from_trace(distribution: Trace, aggregation: Trace,
                       c_f: float) -> ModelProfile:
    """Build a profile from one iteration's partitioned, normalized traces.

    Parameter order and sizes come from the distribution trace. Gradient
    compute gaps come from inter-send gaps in the aggregation trace read in
    reverse model order, with the first gap measured from t=0 (sends hit the
    network as soon as gradients are ready, so gaps equal compute time).
    Times must therefore be phase-relative: t=0 in the aggregation trace is
    the moment backpropagation may begin, so a first send at t=0.2 means the
    first gradient took 0.2 s to compute. The scalar forward-pass time c_f
    is split across layers proportionally to size.
    """
    if c_f < 0:
        raise ValidationError("c_f must be >= 0")

    order: dict[str, float] = {}
    for e in distribution.events:
        if e.kind == "marker":
            continue
        order.setdefault(e.param, e.size)
    if not order:
        raise ValidationError("distribution trace names no parameters")

    agg_time: dict[str, float] = {}
    for e in aggregation.events:
        if e.kind == "marker":
            continue
        if e.param not in order:
            raise ValidationError(
                f"aggregation trace names unknown parameter {e.param!r}"
            )
        agg_time.setdefault(e.param, e.t)
    missing = [p for p in order if p not in agg_time]
    if missing:
        raise ValidationError(
            f"aggregation trace missing parameters: {', '.join(missing)}"
        )

    names = list(order)
    total = math.fsum(order.values())
    bp: dict[str, float] = {}
    prev = 0.0
    for name in reversed(names):
        gap = agg_time[name] - prev
        if gap < 0:
            raise ValidationError(
                f"aggregation sends out of reverse-model order at {name!r}"
            )
        bp[name] = gap
        prev = agg_time[name]

    params = tuple(
        ParamSpec(
            name=name,
            size=order[name],
            bp_compute=bp[name],
            fp_compute=c_f * order[name] / total,
        )
        for name in names
    )
    return ModelProfile(params=params)


@dataclass(frozen=True)
class ProfileSpec:
    """Recipe for a synthetic model profile.

    The last layer takes ``last_layer_size_fraction`` of the bytes and
    ``first_bp_fraction`` of the backprop compute (it is the first layer to
    be computed during backpropagation). The remaining mass is spread over
    the other layers either uniformly or geometrically.
    """

    layer_count: int
    total_size: float
    fwd_total: float
    bp_total: float
    first_bp_fraction: float
    last_layer_size_fraction: float
    remainder_distribution: str = "uniform"
    geometric_ratio: float = 0.5

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValidationError("layer_count must be >= 1")
        if self.total_size <= 0:
            raise ValidationError("total_size must be > 0")
        if self.fwd_total < 0 or self.bp_total < 0:
            raise ValidationError("compute totals must be >= 0")
        for frac in (self.first_bp_fraction, self.last_layer_size_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValidationError(f"fraction {frac} outside [0, 1]")
        if self.layer_count > 1 and not (
                0.0 < self.last_layer_size_fraction < 1.0):
            raise ValidationError(
                "multi-layer profiles need 0 < last_layer_size_fraction < 1; "
                "every parameter must have positive size")
        if self.remainder_distribution not in ("uniform", "geometric"):
            raise ValidationError(
                f"unknown remainder distribution {self.remainder_distribution!r}"
            )
        if self.remainder_distribution == "geometric" and self.geometric_ratio <= 0:
            raise ValidationError("geometric_ratio must be > 0")


def _exact_split(total: float, weights: list[float]) -> list[float]:
    """Split total by weights so the fsum of the parts equals total exactly."""
    wsum = math.fsum(weights)
    if wsum == 0:
        parts = [0.0] * len(weights)
        if parts:
            parts[-1] = total
        return parts
    parts = [total * w / wsum for w in weights]
    # Nudge the largest part until fsum lands exactly on total.
    idx = max(range(len(parts)), key=lambda i: parts[i])
    for _ in range(4):
        diff = total - math.fsum(parts)
        if diff == 0.0:
            break
        parts[idx] += diff
    return parts


def synthesize_profile(spec: ProfileSpec, seed: int = 0) -> ModelProfile:
    """Deterministically build a profile matching a ProfileSpec.

    The recipe fully determines the result; the seed is accepted for API
    stability but does not perturb the layout.
    """
    del seed
    n = spec.layer_count
    width = max(2, len(str(n - 1)))
    names = [f"layer{i:0{width}d}" for i in range(n)]

    if n == 1:
        sizes = [spec.total_size]
        bps = [spec.bp_total]
    else:
        if spec.remainder_distribution == "uniform":
            weights = [1.0] * (n - 1)
        else:
            weights = [spec.geometric_ratio ** i for i in range(n - 1)]
        last_size = spec.total_size * spec.last_layer_size_fraction
        sizes = _exact_split(spec.total_size - last_size, weights) + [last_size]
        for _ in range(4):
            diff = spec.total_size - math.fsum(sizes)
            if diff == 0.0:
                break
            sizes[-1] += diff
        last_bp = spec.bp_total * spec.first_bp_fraction
        bps = _exact_split(spec.bp_total - last_bp, weights) + [last_bp]
        for _ in range(4):
            diff = spec.bp_total - math.fsum(bps)
            if diff == 0.0:
                break
            bps[-1] += diff

    fps = _exact_split(spec.fwd_total, sizes)
    params = tuple(
        ParamSpec(name=names[i], size=sizes[i], bp_compute=bps[i], fp_compute=fps[i])
        for i in range(n)
    )
    return ModelProfile(params=params)


def mutate_profile(profile: ModelProfile, template: ParamSpec, count: int,
                   position: int) -> ModelProfile:
    """Insert ``count`` copies of a template layer at ``position``."""
    if count < 0:
        raise ValidationError("count must be >= 0")
    if not 0 <= position <= len(profile.params):
        raise ValidationError(
            f"position {position} outside [0, {len(profile.params)}]"
        )
    if count == 0:
        return profile
    existing = {p.name for p in profile.params}
    inserted = []
    k = 0
    while len(inserted) < count:
        name = f"{template.name}_{k:03d}"
        if name not in existing:
            inserted.append(replace(template, name=name))
            existing.add(name)
        k += 1
    params = (
        profile.params[:position] + tuple(inserted) + profile.params[position:]
    )
    return ModelProfile(params=params)


def scale_compute(profile: ModelProfile, factor: float) -> ModelProfile:
    """Divide every compute time by ``factor`` (sizes unchanged)."""
    if factor <= 0:
        raise ValidationError("compute speedup factor must be > 0")
    if factor == 1.0:
        return profile
    params = tuple(
        replace(p, bp_compute=p.bp_compute / factor, fp_compute=p.fp_compute / factor)
        for p in profile.params
    )
    return ModelProfile(params=params)


# --------------------------------------------------------------------------
# Profile JSON files
# --------------------------------------------------------------------------

def profile_to_json(profile: ModelProfile) -> str:
    doc = {
        "params": [
            {
                "name": p.name,
                "size": p.size,
                "bp_compute": p.bp_compute,
                "fp_compute": p.fp_compute,
            }
            for p in profile.params
        ],
        "m": profile.m,
        "c_f": profile.c_f,
        "c_b": profile.c_b,
        "b1": profile.b1,
    }
    return json.dumps(doc, indent=2) + "\n"


def profile_from_json(text: str | bytes) -> ModelProfile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"profile JSON: {exc}") from None
    if not isinstance(doc, dict) or "params" not in doc:
        raise ParseError("profile JSON: missing 'params'")
    allowed = {"params", "m", "c_f", "c_b", "b1"}
    unknown = set(doc) - allowed
    if unknown:
        raise ParseError(f"profile JSON: unknown keys {sorted(unknown)}")
    params = []
    for i, entry in enumerate(doc["params"]):
        extra = set(entry) - {"name", "size", "bp_compute", "fp_compute"}
        if extra:
            raise ParseError(f"profile JSON: param {i}: unknown keys {sorted(extra)}")
        try:
            params.append(
                ParamSpec(
                    name=entry["name"],
                    size=float(entry["size"]),
                    bp_compute=float(entry.get("bp_compute", 0.0)),
                    fp_compute=float(entry.get("fp_compute", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"profile JSON: param {i}: {exc}") from None
    profile = ModelProfile(params=tuple(params))
    for field in ("m", "c_f", "c_b", "b1"):
        if field in doc:
            stated = float(doc[field])
            actual = getattr(profile, field)
            if not math.isclose(stated, actual, rel_tol=1e-9, abs_tol=1e-12):
                raise ParseError(
                    f"profile JSON: stated {field}={stated} but parameters "
                    f"sum to {actual}"
                )
    return profile
