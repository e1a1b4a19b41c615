"""Flow-level simulator and analytic cost model for the network side of
synchronous data-parallel DNN training.

Public surface:

* :mod:`netsim.trace`      -- traces, model profiles, synthesis and mutation
* :mod:`netsim.analytic`   -- closed-form iteration times and thresholds
* :mod:`netsim.engine`     -- deterministic fluid-network event core
* :mod:`netsim.mechanisms` -- parameter server, ring-reduce, butterfly runs
* :mod:`netsim.experiments`-- sweeps, speedups, rankings
* :mod:`netsim.cli`        -- command-line front end
"""

from .analytic import (AnalyticInputs, MechanismFlags, block_matches_agg,
                       iteration_time, mechanism_threshold, ring_overhead,
                       second_ring_overhead, speedup_curve, stagger_hurts,
                       step_times)
from .engine import Barrier, SendQueue, SimResult, Simulator, Topology, \
    max_min_rates
from .errors import InternalError, NetsimError, ParseError, ValidationError
from .experiments import (ResultRow, ResultTable, SweepSpec, rank_mechanisms,
                          run_sweep, speedup_vs_baseline, superadditive)
from .mechanisms import (ButterflyOptions, ClusterConfig, PsOptions,
                         RingOptions, Scenario, assign_params,
                         measure_steady_state, simulate, simulate_butterfly,
                         simulate_ps, simulate_ring, validate_scenario)
from .trace import (ModelProfile, ParamSpec, ProfileSpec, Trace, TraceEvent,
                    TraceMeta, mutate_profile, normalize, parse_trace,
                    partition_iteration, profile_from_json, profile_from_trace,
                    profile_to_json, rebase, scale_compute, serialize_trace,
                    synthesize_profile)

__version__ = "0.1.0"
