"""Strict JSON loaders for scenario and sweep files.

Unknown keys are rejected everywhere so a typo in a config fails loudly
instead of silently running something else.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import ParseError
from .experiments import MECHANISM_PRESETS, SweepSpec
from .mechanisms import (ButterflyOptions, ClusterConfig, PsOptions,
                         RingOptions, Scenario)
from .trace import ModelProfile, ParamSpec, ProfileSpec, profile_from_json, \
    synthesize_profile

SEED_ENV = "NETSIM_SEED"


def _require_keys(doc: dict, allowed: set, required: set, where: str):
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected an object")
    unknown = set(doc) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise ParseError(f"{where}: missing keys {sorted(missing)}")


def _load_profile(doc, base_dir: Path) -> ModelProfile:
    if isinstance(doc, str):
        path = Path(doc)
        if not path.is_absolute():
            path = base_dir / path
        try:
            return profile_from_json(path.read_text())
        except OSError as exc:
            raise ParseError(f"profile file {doc!r}: {exc}") from None
    if isinstance(doc, dict) and "synthesize" in doc:
        _require_keys(doc, {"synthesize"}, {"synthesize"}, "profile")
        spec_doc = doc["synthesize"]
        allowed = {"layer_count", "total_size", "fwd_total", "bp_total",
                   "first_bp_fraction", "last_layer_size_fraction",
                   "remainder_distribution", "geometric_ratio", "seed"}
        required = {"layer_count", "total_size", "fwd_total", "bp_total",
                    "first_bp_fraction", "last_layer_size_fraction"}
        _require_keys(spec_doc, allowed, required, "profile.synthesize")
        seed = int(spec_doc.get("seed", 0))
        kwargs = {k: v for k, v in spec_doc.items() if k != "seed"}
        kwargs["layer_count"] = int(kwargs["layer_count"])
        return synthesize_profile(ProfileSpec(**kwargs), seed=seed)
    if isinstance(doc, dict):
        return profile_from_json(json.dumps(doc))
    raise ParseError("profile: expected a path, an inline profile object, "
                     "or a synthesize recipe")


def _load_cluster(doc) -> ClusterConfig:
    allowed = {"workers", "parameter_servers", "bandwidth", "latency",
               "variance_sigma", "seed"}
    _require_keys(doc, allowed, {"workers", "parameter_servers", "bandwidth"},
                  "cluster")
    seed = int(doc.get("seed", 0))
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ParseError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return ClusterConfig(
        workers=int(doc["workers"]),
        parameter_servers=int(doc["parameter_servers"]),
        bandwidth=float(doc["bandwidth"]),
        latency=float(doc.get("latency", 0.0)),
        variance_sigma=float(doc.get("variance_sigma", 0.0)),
        seed=seed,
    )


def _load_mechanism(doc):
    if not isinstance(doc, dict) or "type" not in doc:
        raise ParseError("mechanism: expected an object with a 'type' key")
    kind = doc["type"]
    if kind == "ps":
        allowed = {"type", "multicast", "in_net_agg", "distribution_order",
                   "assignment", "message_bits", "global_barrier"}
        _require_keys(doc, allowed, {"type"}, "mechanism")
        message_bits = doc.get("message_bits")
        return PsOptions(
            multicast=bool(doc.get("multicast", False)),
            in_net_agg=bool(doc.get("in_net_agg", False)),
            distribution_order=doc.get("distribution_order", "round_robin"),
            assignment=doc.get("assignment", "tf_round_robin"),
            message_bits=float(message_bits) if message_bits is not None else None,
            global_barrier=bool(doc.get("global_barrier", True)),
        )
    if kind == "ring_reduce":
        allowed = {"type", "messaging", "multicast_second_ring"}
        _require_keys(doc, allowed, {"type"}, "mechanism")
        return RingOptions(
            messaging=bool(doc.get("messaging", False)),
            multicast_second_ring=bool(doc.get("multicast_second_ring", False)),
        )
    if kind == "butterfly":
        _require_keys(doc, {"type"}, {"type"}, "mechanism")
        return ButterflyOptions()
    raise ParseError(f"mechanism: unknown type {kind!r}")


def scenario_from_json(text: str | bytes, base_dir: str | Path = ".") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"scenario JSON: {exc}") from None
    _require_keys(doc, {"profile", "cluster", "mechanism"},
                  {"profile", "cluster", "mechanism"}, "scenario")
    return Scenario(
        profile=_load_profile(doc["profile"], Path(base_dir)),
        cluster=_load_cluster(doc["cluster"]),
        mechanism=_load_mechanism(doc["mechanism"]),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"scenario file {path}: {exc}") from None
    return scenario_from_json(text, base_dir=path.parent)


def _load_template(doc) -> ParamSpec:
    allowed = {"name", "size", "bp_compute", "fp_compute"}
    _require_keys(doc, allowed, {"name", "size"}, "template")
    return ParamSpec(
        name=doc["name"], size=float(doc["size"]),
        bp_compute=float(doc.get("bp_compute", 0.0)),
        fp_compute=float(doc.get("fp_compute", 0.0)),
    )


def sweep_from_json(text: str | bytes, base_dir: str | Path = ".") -> SweepSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"sweep JSON: {exc}") from None
    allowed = {"base", "axis", "values", "mechanisms", "template",
               "insert_position"}
    _require_keys(doc, allowed, {"base", "axis", "values", "mechanisms"},
                  "sweep")
    base = doc["base"]
    scenario = scenario_from_json(json.dumps(base), base_dir=base_dir) \
        if isinstance(base, dict) else None
    if scenario is None:
        raise ParseError("sweep: 'base' must be an inline scenario object")
    for name in doc["mechanisms"]:
        if name not in MECHANISM_PRESETS:
            raise ParseError(f"unknown mechanism {name!r}")
    template = _load_template(doc["template"]) if "template" in doc else None
    position = doc.get("insert_position")
    return SweepSpec(
        base=scenario,
        axis=doc["axis"],
        values=tuple(float(v) for v in doc["values"]),
        mechanisms=tuple(doc["mechanisms"]),
        template=template,
        insert_position=int(position) if position is not None else None,
    )


def load_sweep(path: str | Path) -> SweepSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"sweep file {path}: {exc}") from None
    return sweep_from_json(text, base_dir=path.parent)
