"""Scenario sweeps and mechanism ranking.

A sweep takes a base scenario, varies one axis (bandwidth, worker count,
compute speedup factor, or synthetic layers added to the model) and runs a
set of named mechanism configurations at every axis value. The no-option
parameter-server run is always included as the baseline that speedups are
measured against. Rows come out ordered by (axis value, mechanism) so
reruns diff cleanly.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .errors import ParseError, ValidationError
from .mechanisms import (ButterflyOptions, PsOptions, RingOptions, Scenario,
                         simulate, validate_scenario)
from .trace import ParamSpec, mutate_profile, scale_compute

AXES = ("bandwidth", "workers", "compute_factor", "added_layers")

BASELINE = "baseline"

MECHANISM_PRESETS = {
    "baseline": lambda: PsOptions(),
    "multicast": lambda: PsOptions(multicast=True),
    "agg": lambda: PsOptions(in_net_agg=True),
    "multicast+agg": lambda: PsOptions(multicast=True, in_net_agg=True),
    "block": lambda: PsOptions(distribution_order="block"),
    "block+agg": lambda: PsOptions(distribution_order="block", in_net_agg=True),
    "ring": lambda: RingOptions(messaging=True),
    "ring+multicast": lambda: RingOptions(messaging=True,
                                          multicast_second_ring=True),
    "butterfly": lambda: ButterflyOptions(),
}

# Placeholder synthetic module templates for model-growth studies. Real
# module costs are workload specific; override them per sweep.
COMPUTE_HEAVY_MODULE = ParamSpec(
    name="module_compute", size=9.0e6, bp_compute=0.015, fp_compute=0.005)
NETWORK_HEAVY_MODULE = ParamSpec(
    name="module_network", size=180.0e6, bp_compute=0.001, fp_compute=0.0005)


@dataclass(frozen=True)
class SweepSpec:
    base: Scenario
    axis: str
    values: tuple
    mechanisms: tuple
    template: ParamSpec | None = None
    insert_position: int | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValidationError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValidationError("sweep values must be nonempty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValidationError("sweep values must be strictly increasing")
        if self.axis == "added_layers" and self.template is None:
            raise ValidationError("added_layers sweep needs a layer template")
        for name in self.mechanisms:
            if name not in MECHANISM_PRESETS:
                raise ParseError(f"unknown mechanism {name!r}")


@dataclass(frozen=True)
class ResultRow:
    axis: str
    value: float
    mechanism: str
    iteration_s: float
    speedup: float


@dataclass(frozen=True)
class ResultTable:
    rows: tuple
    log_paths: tuple = ()  # parallel to rows when logs were exported

    def at(self, value) -> dict:
        """{mechanism: row} for one axis value."""
        return {r.mechanism: r for r in self.rows if r.value == value}

    def to_csv(self) -> str:
        lines = ["axis,value,mechanism,iteration_s,speedup"]
        for r in self.rows:
            lines.append(f"{r.axis},{r.value!r},{r.mechanism},"
                         f"{r.iteration_s!r},{r.speedup!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        import json

        rows = []
        for i, r in enumerate(self.rows):
            doc = {"axis": r.axis, "value": r.value, "mechanism": r.mechanism,
                   "iteration_s": r.iteration_s, "speedup": r.speedup}
            if self.log_paths:
                doc["event_log"] = self.log_paths[i]
            rows.append(doc)
        return json.dumps({"rows": rows}, indent=2) + "\n"


def _scenario_at(spec: SweepSpec, value, mech_name: str) -> Scenario:
    base = spec.base
    cluster = base.cluster
    profile = base.profile
    if spec.axis == "bandwidth":
        cluster = replace(cluster, bandwidth=float(value))
    elif spec.axis == "workers":
        cluster = replace(cluster, workers=int(value))
    elif spec.axis == "compute_factor":
        profile = scale_compute(profile, float(value))
    else:  # added_layers
        position = spec.insert_position
        if position is None:
            position = max(0, len(profile.params) - 1)
        profile = mutate_profile(profile, spec.template, int(value), position)
    mechanism = MECHANISM_PRESETS[mech_name]()
    return Scenario(profile=profile, cluster=cluster, mechanism=mechanism)


def _run_one(args):
    idx, scenario, kwargs = args
    result = simulate(scenario, **kwargs)
    return idx, result.iteration_time


def run_sweep(spec: SweepSpec, jobs: int = 1, *,
              agg_switch_charged: bool = True,
              log_dir=None) -> ResultTable:
    """Run every (value, mechanism) cell plus the baseline column.

    Cells are independent simulations; jobs > 1 fans them out across
    processes. Row order is deterministic either way. With log_dir set, one
    JSON-lines event log is written per cell and referenced from the table
    (single-process only; logs are large).
    """
    if log_dir is not None and jobs > 1:
        raise ValidationError("event-log export requires jobs=1")
    mech_names = list(spec.mechanisms)
    if BASELINE not in mech_names:
        mech_names.insert(0, BASELINE)
    cells = []
    for value in spec.values:
        for name in mech_names:
            scenario = _scenario_at(spec, value, name)
            try:
                validate_scenario(scenario)
            except ValidationError as exc:
                raise ValidationError(
                    f"sweep cell ({spec.axis}={value}, {name}): {exc}") from None
            cells.append((value, name, scenario))

    kwargs = {"agg_switch_charged": agg_switch_charged,
              "collect_log": log_dir is not None}
    times = [0.0] * len(cells)
    log_paths = []
    if jobs <= 1:
        from pathlib import Path

        for i, (value, name, scenario) in enumerate(cells):
            result = simulate(scenario, **kwargs)
            times[i] = result.iteration_time
            if log_dir is not None:
                path = Path(log_dir) / f"{spec.axis}_{value:g}_{name}.jsonl"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(result.event_log_jsonl())
                log_paths.append(str(path))
    else:
        work = [(i, scenario, kwargs) for i, (_v, _n, scenario) in enumerate(cells)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for idx, t in pool.map(_run_one, work):
                times[idx] = t

    base_time = {}
    for i, (value, name, _s) in enumerate(cells):
        if name == BASELINE:
            base_time[value] = times[i]
    rows = []
    for i, (value, name, _s) in enumerate(cells):
        rows.append(ResultRow(
            axis=spec.axis, value=float(value), mechanism=name,
            iteration_s=times[i], speedup=base_time[value] / times[i]))
    return ResultTable(rows=tuple(rows), log_paths=tuple(log_paths))


def speedup_vs_baseline(table: ResultTable) -> ResultTable:
    """Recompute the speedup column from the baseline rows."""
    base_time = {}
    for r in table.rows:
        if r.mechanism == BASELINE:
            base_time[r.value] = r.iteration_s
    rows = []
    for r in table.rows:
        if r.value not in base_time:
            raise ValidationError(
                f"no baseline row at {r.axis}={r.value}")
        rows.append(replace(r, speedup=base_time[r.value] / r.iteration_s))
    return ResultTable(rows=tuple(rows))


def rank_mechanisms(table: ResultTable, value, *,
                    expected=None, tie_rel: float = 1e-9) -> list[list[str]]:
    """Mechanisms at one axis value, fastest first, ties grouped.

    Ties are iteration times within tie_rel relative of each other (exact
    ties are possible because the engine is deterministic).
    """
    at_value = table.at(value)
    if not at_value:
        raise ValidationError(f"no rows at axis value {value!r}")
    if expected is not None:
        missing = [m for m in expected if m not in at_value]
        if missing:
            raise ValidationError(
                f"incomplete table at {value!r}: missing {', '.join(missing)}")
    ordered = sorted(at_value.values(), key=lambda r: r.iteration_s)
    groups: list[list[str]] = []
    last_t = None
    for r in ordered:
        if groups and math.isclose(r.iteration_s, last_t, rel_tol=tie_rel,
                                   abs_tol=0.0):
            groups[-1].append(r.mechanism)
        else:
            groups.append([r.mechanism])
            last_t = r.iteration_s
    return groups


def superadditive(table: ResultTable, value, combined: str = "multicast+agg",
                  parts: tuple = ("multicast", "agg")) -> bool:
    """Whether the combined mechanism beats the additive composition of its
    parts (speedup(combined) > speedup(a) + speedup(b) - 1)."""
    at_value = table.at(value)
    for name in (combined,) + tuple(parts):
        if name not in at_value:
            raise ValidationError(f"missing {name!r} at {value!r}")
    additive = sum(at_value[p].speedup for p in parts) - (len(parts) - 1)
    return at_value[combined].speedup > additive
