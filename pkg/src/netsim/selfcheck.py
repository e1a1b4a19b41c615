"""Built-in cross-checks: fluid engine vs brute-force oracle, byte
conservation, determinism, and rate-allocation properties.

These run in CI and behind the ``selfcheck`` CLI subcommand. The randomized
instances are small (at most 4 endpoints and 6 transfers) so the oracle
stays fast while still mixing unicast, multicast and aggregation traffic.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from . import oracle
from .engine import IN, OUT, Simulator, max_min_rates
from .mechanisms import ClusterConfig, PsOptions, RingOptions, Scenario, simulate
from .trace import ModelProfile, ParamSpec

REL_TOL = 1e-3  # engine vs oracle agreement bar


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def random_instance(rng: random.Random) -> oracle.Instance:
    """A small random mix of unicast, multicast and aggregation transfers.

    At most 4 endpoints and at most 6 flows total; an aggregation of k
    sources costs k branch flows plus the forwarded one.
    """
    n_nodes = rng.randint(2, 4)
    nodes = tuple(f"n{i}" for i in range(n_nodes))
    latency = rng.choice([0.0, 0.0, 0.05])
    jobs = []
    budget = 6
    j = 0
    while budget > 0 and (not jobs or rng.random() > 0.15):
        kind = rng.choice(["unicast", "unicast", "multicast", "agg"])
        size = rng.uniform(0.5, 4.0)
        start = rng.uniform(0.0, 3.0)
        if kind == "agg" and budget >= 2:
            dst = rng.randrange(n_nodes)
            others = [nodes[i] for i in range(n_nodes) if i != dst]
            k = rng.randint(1, min(len(others), budget - 1))
            branches = tuple(
                (s, rng.uniform(0.0, 3.0)) for s in others[:k])
            jobs.append(oracle.Aggregation(f"job{j}", nodes[dst], size,
                                           branches,
                                           charged=rng.random() < 0.7))
            budget -= k + 1
        elif kind == "multicast":
            src = rng.randrange(n_nodes)
            others = [nodes[i] for i in range(n_nodes) if i != src]
            k = rng.randint(1, len(others))
            jobs.append(oracle.Multicast(f"job{j}", start, nodes[src],
                                         tuple(others[:k]), size))
            budget -= 1
        else:
            src, dst = rng.sample(range(n_nodes), 2)
            jobs.append(oracle.Unicast(f"job{j}", start, nodes[src],
                                       nodes[dst], size))
            budget -= 1
        j += 1
    return oracle.Instance(nodes=nodes, rate=1.0, jobs=tuple(jobs),
                           latency=latency)


def run_instance_engine(instance: oracle.Instance, rate_fn=None) -> dict:
    """Run an oracle instance on the event-driven engine; returns
    {job: completion time} using the same completion definitions."""
    sim = Simulator(latency=instance.latency, rate_fn=rate_fn,
                    collect_log=False)
    for n in instance.nodes:
        sim.add_node(n, instance.rate, instance.rate)
    done: dict = {}

    for job in instance.jobs:
        if isinstance(job, oracle.Unicast):
            def start(j=job):
                sim.start_unicast(
                    j.src, j.dst, j.size, tag=j.job,
                    on_delivered=lambda _f, _d, j=j: done.__setitem__(
                        j.job, sim.now))
            sim.at(job.start, start)
        elif isinstance(job, oracle.Multicast):
            def start(j=job):
                left = {"n": len(j.dsts)}

                def delivered(_f, _d, j=j, left=left):
                    left["n"] -= 1
                    if left["n"] == 0:
                        done[j.job] = sim.now
                sim.start_multicast(j.src, j.dsts, j.size, tag=j.job,
                                    on_delivered=delivered)
            sim.at(job.start, start)
        else:
            from .engine import AggGroup

            group = AggGroup(
                sim, srcs=(), dst=job.dst, size=job.size, tag=job.job,
                charged=job.charged, expected=len(job.branches),
                on_delivered=lambda _f, _d, j=job: done.__setitem__(
                    j.job, sim.now))
            for src, start_t in job.branches:
                sim.at(start_t, group.start_branch, src)
    sim.run()
    return done


def check_oracle_equivalence(seed: int = 0, instances: int = 200,
                             dt: float = 0.01, rate_fn=None) -> CheckResult:
    rng = random.Random(seed)
    worst = 0.0
    for i in range(instances):
        instance = random_instance(rng)
        got = run_instance_engine(instance, rate_fn=rate_fn)
        want = oracle.run_instance(instance, dt=dt)
        if set(got) != set(want):
            return CheckResult("oracle_equivalence", False,
                               f"instance {i}: job sets differ")
        for job, t_ref in want.items():
            rel = abs(got[job] - t_ref) / max(t_ref, 1e-12)
            worst = max(worst, rel)
            if rel > REL_TOL:
                return CheckResult(
                    "oracle_equivalence", False,
                    f"instance {i} {job}: engine {got[job]!r} vs oracle "
                    f"{t_ref!r} (rel {rel:.2e})")
    return CheckResult("oracle_equivalence", True,
                       f"{instances} instances, worst rel err {worst:.2e}")


def _toy_profile() -> ModelProfile:
    return ModelProfile(params=(
        ParamSpec("a", size=2.0e9, bp_compute=0.01, fp_compute=0.01),
        ParamSpec("b", size=1.0e9, bp_compute=0.02, fp_compute=0.005),
        ParamSpec("c", size=4.0e9, bp_compute=0.05, fp_compute=0.02),
    ))


def check_conservation() -> CheckResult:
    """Byte identities: per-server ingress carries W copies of its shard at
    baseline and one copy with in-network aggregation; egress carries one
    shard copy with multicast no matter how many workers."""
    profile = _toy_profile()
    for W in (1, 2, 4):
        for P in (1, 2):
            cluster = ClusterConfig(workers=W, parameter_servers=P,
                                    bandwidth=1e9)
            shard = [0.0] * P
            for p, spec in enumerate(profile.params):
                shard[p % P] += spec.size

            def run(opts):
                sc = Scenario(profile=profile, cluster=cluster, mechanism=opts)
                return simulate(sc, collect_log=False)

            base = run(PsOptions())
            agg = run(PsOptions(in_net_agg=True))
            mcast = run(PsOptions(multicast=True))
            for j in range(P):
                if shard[j] == 0.0:
                    continue
                checks = [
                    (base.link(f"ps{j}", IN), W * shard[j], "baseline ingress"),
                    (agg.link(f"ps{j}", IN),
                     shard[j] if W > 1 else W * shard[j], "agg ingress"),
                    (mcast.link(f"ps{j}", OUT), shard[j], "multicast egress"),
                    (base.link(f"ps{j}", OUT), W * shard[j], "baseline egress"),
                ]
                for got, want, label in checks:
                    if not math.isclose(got, want, rel_tol=1e-9, abs_tol=0.0):
                        return CheckResult(
                            "conservation", False,
                            f"W={W} P={P} ps{j} {label}: {got!r} != {want!r}")
    return CheckResult("conservation", True, "W in 1,2,4 x P in 1,2")


def check_determinism() -> CheckResult:
    profile = _toy_profile()
    scenarios = [
        Scenario(profile=profile,
                 cluster=ClusterConfig(3, 1, 1e9, variance_sigma=0.3, seed=7),
                 mechanism=PsOptions(in_net_agg=True)),
        Scenario(profile=profile,
                 cluster=ClusterConfig(4, 1, 1e9),
                 mechanism=RingOptions(messaging=True)),
    ]
    for i, sc in enumerate(scenarios):
        a = simulate(sc)
        b = simulate(sc)
        if a != b:
            return CheckResult("determinism", False, f"scenario {i} diverged")
    return CheckResult("determinism", True, "bit-identical reruns")


def check_rate_properties(seed: int = 0, trials: int = 60,
                          rate_fn=None) -> CheckResult:
    """Work conservation (every flow sees one saturated resource) and
    monotonicity (an extra flow never speeds anyone up) of the allocator."""
    rate_fn = rate_fn or max_min_rates
    rng = random.Random(seed)

    class _F:
        def __init__(self, fid, uses):
            self.fid = fid
            self.uses = uses

    for trial in range(trials):
        n_nodes = rng.randint(2, 4)
        caps = {}
        for i in range(n_nodes):
            caps[(f"n{i}", OUT)] = 1.0
            caps[(f"n{i}", IN)] = 1.0
        flows = []
        for fid in range(rng.randint(1, 6)):
            src, dst = rng.sample(range(n_nodes), 2)
            flows.append(_F(fid, ((f"n{src}", OUT), (f"n{dst}", IN))))
        rates = rate_fn(flows, caps)
        loads = {r: 0.0 for r in caps}
        for f in flows:
            for r in f.uses:
                loads[r] += rates[f.fid]
        for r, load in loads.items():
            if load > caps[r] * (1 + 1e-9):
                return CheckResult("rate_properties", False,
                                   f"trial {trial}: {r} overloaded: {load!r}")
        for f in flows:
            saturated = any(
                math.isclose(loads[r], caps[r], rel_tol=1e-9) for r in f.uses)
            if not saturated:
                return CheckResult(
                    "rate_properties", False,
                    f"trial {trial}: flow {f.fid} has no saturated bottleneck")
    return CheckResult("rate_properties", True, f"{trials} trials")


def buggy_rate_fn(flows, capacities):
    """Test fixture: a subtly broken allocator (rates 1% too high)."""
    rates = max_min_rates(flows, capacities)
    return {fid: r * 1.01 for fid, r in rates.items()}


def run_selfcheck(seed: int = 0, instances: int = 200,
                  rate_fn=None) -> list[CheckResult]:
    results = [
        check_oracle_equivalence(seed=seed, instances=instances,
                                 rate_fn=rate_fn),
        check_conservation(),
        check_determinism(),
        check_rate_properties(seed=seed, rate_fn=rate_fn),
    ]
    return results
