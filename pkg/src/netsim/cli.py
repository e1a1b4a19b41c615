"""Command-line front end.

Subcommands: ``analytic`` (closed-form queries), ``simulate`` (one scenario
file), ``sweep`` (a sweep file to CSV), ``trace parse|partition|synth|mutate``
(trace tooling), and ``selfcheck`` (engine-vs-oracle battery).

Exit codes: 0 ok, 1 validation error, 2 input/flag parse error, 3 internal
invariant violation. Every failure prints one machine-parsable line starting
with ``error:<category>:``. All output is plain CSV/JSON; plotting lives
elsewhere.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import analytic
from .config import load_scenario, load_sweep
from .errors import InternalError, ParseError, ValidationError
from .experiments import rank_mechanisms, run_sweep
from .mechanisms import measure_steady_state, simulate
from .selfcheck import buggy_rate_fn, run_selfcheck
from .trace import (ParamSpec, ProfileSpec, mutate_profile, normalize,
                    parse_trace, partition_iteration, profile_from_json,
                    profile_to_json, rebase, serialize_trace,
                    synthesize_profile)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARSE = 2
EXIT_INTERNAL = 3


def _fmt(x: float) -> str:
    return f"{x:.12g}"


@click.group()
def cli():
    """Iteration-time simulator for distributed DNN training networks."""


# -- analytic ---------------------------------------------------------------

@cli.command("analytic")
@click.option("--m", "m", type=float, required=True, help="Model size, bits.")
@click.option("--b", "b", type=float, required=True, help="Link rate, bits/s.")
@click.option("--cf", type=float, required=True, help="Forward-pass seconds.")
@click.option("--cb", type=float, required=True, help="Backprop seconds.")
@click.option("--w", type=int, default=1, show_default=True)
@click.option("--p", type=int, default=1, show_default=True)
@click.option("--multicast", is_flag=True)
@click.option("--agg", is_flag=True)
@click.option("--thresholds", is_flag=True,
              help="Print per-mechanism payoff worker counts and exit.")
@click.option("--curve", type=int, default=0,
              help="Print speedup CSV for w=1..N using the given flags.")
def cmd_analytic(m, b, cf, cb, w, p, multicast, agg, thresholds, curve):
    """Closed-form iteration times, payoff thresholds and speedup curves."""
    inputs = analytic.AnalyticInputs(m=m, w=w, p=p, b=b, c_f=cf, c_b=cb)
    if thresholds:
        click.echo(f"multicast,{analytic.mechanism_threshold(inputs, 'multicast')}")
        click.echo(f"agg,{analytic.mechanism_threshold(inputs, 'in_net_agg')}")
        return
    flags = analytic.MechanismFlags(multicast=multicast, in_net_agg=agg)
    if curve:
        if not (multicast or agg):
            raise ParseError("--curve needs --multicast and/or --agg")
        click.echo("w,speedup")
        for wi, s in analytic.speedup_curve(inputs, flags, range(1, curve + 1)):
            click.echo(f"{wi},{_fmt(s)}")
        return
    d, a = analytic.step_times(inputs, flags)
    click.echo(f"D,{_fmt(d)}")
    click.echo(f"A,{_fmt(a)}")
    click.echo(f"iteration,{_fmt(d + a)}")


# -- simulate ---------------------------------------------------------------

@cli.command("simulate")
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False),
              help="Write the JSON-lines event log here.")
@click.option("--free-switch-hop", is_flag=True,
              help="Zero-cost aggregation switch forwarding (sensitivity runs).")
@click.option("--steady-state", is_flag=True,
              help="Report the three-iteration steady-state time instead.")
def cmd_simulate(scenario_file, log_path, free_switch_hop, steady_state):
    """Simulate one scenario file; print iteration time and phase spans."""
    scenario = load_scenario(scenario_file)
    charged = not free_switch_hop
    if steady_state:
        t = measure_steady_state(scenario, agg_switch_charged=charged)
        click.echo(f"steady_state_iteration_s,{_fmt(t)}")
        return
    result = simulate(scenario, agg_switch_charged=charged,
                      collect_log=log_path is not None)
    click.echo(f"iteration_s,{_fmt(result.iteration_time)}")
    for node in sorted(result.timeline):
        for phase, start, end in result.timeline[node]:
            click.echo(f"phase,{node},{phase},{_fmt(start)},{_fmt(end)}")
    if log_path:
        Path(log_path).write_text(result.event_log_jsonl())
        click.echo(f"log,{log_path}")


# -- sweep ------------------------------------------------------------------

@cli.command("sweep")
@click.argument("sweep_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False),
              help="Write CSV here instead of stdout.")
@click.option("--json-out", type=click.Path(dir_okay=False),
              help="Also write the table as JSON.")
@click.option("--logs", "log_dir", type=click.Path(file_okay=False),
              help="Write one event log per cell here (requires --jobs 1); "
                   "the JSON table references the files.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel simulations (rows stay ordered).")
@click.option("--free-switch-hop", is_flag=True)
@click.option("--rank-at", type=float, default=None,
              help="Also print the mechanism ranking at this axis value.")
def cmd_sweep(sweep_file, out, json_out, log_dir, jobs, free_switch_hop,
              rank_at):
    """Run a sweep file; emit plot-ready CSV."""
    spec = load_sweep(sweep_file)
    table = run_sweep(spec, jobs=jobs,
                      agg_switch_charged=not free_switch_hop,
                      log_dir=log_dir)
    csv = table.to_csv()
    if out:
        Path(out).write_text(csv)
    else:
        click.echo(csv, nl=False)
    if json_out:
        Path(json_out).write_text(table.to_json())
    if rank_at is not None:
        groups = rank_mechanisms(table, rank_at)
        ranking = " > ".join("=".join(g) for g in groups)
        click.echo(f"ranking,{ranking}")


# -- trace tooling ----------------------------------------------------------

@cli.group("trace")
def trace_group():
    """Parse, partition, synthesize and mutate traces and profiles."""


@trace_group.command("parse")
@click.argument("trace_file", type=click.Path(exists=True, dir_okay=False))
def cmd_trace_parse(trace_file):
    """Validate a trace file and print a summary."""
    tr = parse_trace(Path(trace_file).read_bytes())
    span = tr.events[-1].t - tr.events[0].t
    click.echo(f"events,{len(tr)}")
    click.echo(f"params,{len(tr.params())}")
    click.echo(f"span_s,{_fmt(span)}")


@trace_group.command("partition")
@click.argument("trace_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dist", required=True, type=click.Path(dir_okay=False))
@click.option("--out-agg", required=True, type=click.Path(dir_okay=False))
@click.option("--normalize", "do_norm", is_flag=True,
              help="Write phase-relative times: the distribution half starts "
                   "at its first send, the aggregation half at the marker.")
def cmd_trace_partition(trace_file, out_dist, out_agg, do_norm):
    """Split one iteration's trace at its marker event."""
    tr = parse_trace(Path(trace_file).read_bytes())
    parts = partition_iteration(tr)
    dist, agg = parts.distribution, parts.aggregation
    if do_norm:
        marker_t = next(e.t for e in tr.events if e.kind == "marker")
        dist = normalize(dist)
        agg = rebase(agg, marker_t)
    Path(out_dist).write_text(serialize_trace(dist))
    Path(out_agg).write_text(serialize_trace(agg))
    click.echo(f"distribution_events,{len(dist)}")
    click.echo(f"aggregation_events,{len(agg)}")


@trace_group.command("synth")
@click.option("--layers", type=int, required=True)
@click.option("--size-bits", type=float, required=True)
@click.option("--fwd-s", type=float, required=True)
@click.option("--bp-s", type=float, required=True)
@click.option("--first-bp-frac", type=float, required=True)
@click.option("--last-size-frac", type=float, required=True)
@click.option("--geometric", type=float, default=None,
              help="Spread the remainder geometrically with this ratio.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_trace_synth(layers, size_bits, fwd_s, bp_s, first_bp_frac,
                    last_size_frac, geometric, seed, out):
    """Synthesize a model profile and write it as JSON."""
    spec = ProfileSpec(
        layer_count=layers, total_size=size_bits, fwd_total=fwd_s,
        bp_total=bp_s, first_bp_fraction=first_bp_frac,
        last_layer_size_fraction=last_size_frac,
        remainder_distribution="geometric" if geometric is not None else "uniform",
        geometric_ratio=geometric if geometric is not None else 0.5,
    )
    profile = synthesize_profile(spec, seed=seed)
    Path(out).write_text(profile_to_json(profile))
    click.echo(f"params,{len(profile)}")
    click.echo(f"m_bits,{_fmt(profile.m)}")


@trace_group.command("mutate")
@click.argument("profile_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--template-name", default="module")
@click.option("--template-size", type=float, required=True)
@click.option("--template-bp", type=float, default=0.0)
@click.option("--template-fp", type=float, default=0.0)
@click.option("--count", type=int, required=True)
@click.option("--position", type=int, default=None,
              help="Insertion index; default just before the last layer.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_trace_mutate(profile_file, template_name, template_size, template_bp,
                     template_fp, count, position, out):
    """Insert synthetic layers into a profile."""
    profile = profile_from_json(Path(profile_file).read_text())
    template = ParamSpec(name=template_name, size=template_size,
                         bp_compute=template_bp, fp_compute=template_fp)
    if position is None:
        position = max(0, len(profile.params) - 1)
    mutated = mutate_profile(profile, template, count, position)
    Path(out).write_text(profile_to_json(mutated))
    click.echo(f"params,{len(mutated)}")
    click.echo(f"m_bits,{_fmt(mutated.m)}")


# -- selfcheck ----------------------------------------------------------------

@cli.command("selfcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--instances", type=int, default=200, show_default=True,
              help="Randomized engine-vs-oracle instances.")
@click.option("--inject-rate-bug", is_flag=True, hidden=True)
def cmd_selfcheck(seed, instances, inject_rate_bug):
    """Run the fluid-vs-oracle equivalence suite and invariant battery."""
    rate_fn = buggy_rate_fn if inject_rate_bug else None
    results = run_selfcheck(seed=seed, instances=instances, rate_fn=rate_fn)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        click.echo(f"{status},{r.name},{r.detail}")
        failed = failed or not r.passed
    if failed:
        raise InternalError("selfcheck failed")


def main(argv=None) -> int:
    """Entry point with the exit-code contract applied."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(f"error:parse:{exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return EXIT_PARSE
    except click.ClickException as exc:
        click.echo(f"error:parse:{exc.format_message()}", err=True)
        return EXIT_PARSE
    except click.exceptions.Abort:
        click.echo("error:parse:aborted", err=True)
        return EXIT_PARSE
    except ParseError as exc:
        click.echo(f"error:parse:{exc}", err=True)
        return EXIT_PARSE
    except ValidationError as exc:
        click.echo(f"error:validation:{exc}", err=True)
        return EXIT_VALIDATION
    except InternalError as exc:
        click.echo(f"error:internal:{exc}", err=True)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
