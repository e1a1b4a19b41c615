import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netsim.engine import (IN, OUT, AggGroup, Barrier, NodeId, SendQueue,
                           Simulator, Topology, max_min_rates)
from netsim.errors import ValidationError
from netsim.selfcheck import random_instance, run_instance_engine


def sim_with(nodes, rate=1.0, latency=0.0):
    sim = Simulator(latency=latency)
    for n in nodes:
        sim.add_node(n, rate, rate)
    return sim


class TestUnicast:
    def test_single_flow_full_rate(self):
        sim = sim_with(["a", "b"], latency=0.25)
        done = {}
        sim.start_unicast("a", "b", 1.0,
                          on_delivered=lambda f, d: done.setdefault("t", sim.now))
        sim.run()
        assert done["t"] == pytest.approx(1.25)

    def test_two_flows_share_destination(self):
        sim = sim_with(["a", "b", "c"])
        ts = []
        sim.start_unicast("a", "c", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.start_unicast("b", "c", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.run()
        assert ts == pytest.approx([2.0, 2.0])

    def test_zero_size_rejected(self):
        sim = sim_with(["a", "b"])
        with pytest.raises(ValidationError):
            sim.start_unicast("a", "b", 0.0)

    def test_crossing_flows_full_rate(self):
        sim = sim_with(["a", "b", "c", "d"])
        ts = []
        sim.start_unicast("a", "b", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.start_unicast("c", "d", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.run()
        assert ts == pytest.approx([1.0, 1.0])


class TestMulticast:
    def test_single_destination_degenerates(self):
        a = sim_with(["s", "d"])
        b = sim_with(["s", "d"])
        ta, tb = [], []
        a.start_multicast("s", ("d",), 2.0, on_delivered=lambda f, d: ta.append(a.now))
        b.start_unicast("s", "d", 2.0, on_delivered=lambda f, d: tb.append(b.now))
        a.run()
        b.run()
        assert ta == tb
        assert a.event_log == b.event_log

    def test_idle_receivers_one_copy_on_egress(self):
        sim = sim_with([f"n{i}" for i in range(9)])
        ts = []
        sim.start_multicast("n0", tuple(f"n{i}" for i in range(1, 9)), 1.0,
                            on_delivered=lambda f, d: ts.append((d, sim.now)))
        sim.run()
        assert len(ts) == 8
        assert all(t == pytest.approx(1.0) for _d, t in ts)
        assert sim.link_bits[("n0", OUT)] == pytest.approx(1.0)
        assert sim.link_bits[("n1", IN)] == pytest.approx(1.0)

    def test_slowest_receiver_governs(self):
        sim = sim_with(["s", "d1", "d2", "x"])
        ts = {}
        sim.start_unicast("x", "d2", 10.0)
        sim.start_multicast("s", ("d1", "d2"), 1.0,
                            on_delivered=lambda f, d: ts.setdefault(d, sim.now))
        sim.run()
        # d2 shares its ingress with the background flow, so both branches
        # pace down to b/2.
        assert ts["d1"] == pytest.approx(2.0)
        assert ts["d2"] == pytest.approx(2.0)

    def test_empty_destinations(self):
        sim = sim_with(["s"])
        with pytest.raises(ValidationError):
            sim.start_multicast("s", (), 1.0)


class TestAggregation:
    def test_single_source_two_hops(self):
        sim = sim_with(["w", "p"])
        ts = {}
        sim.start_aggregation(("w",), "p", 1.0,
                              on_delivered=lambda f, d: ts.setdefault("t", sim.now))
        sim.run()
        assert ts["t"] == pytest.approx(2.0)

    def test_parallel_sources_still_two_hops(self):
        sim = sim_with(["w0", "w1", "w2", "p"])
        ts = {}
        sim.start_aggregation(("w0", "w1", "w2"), "p", 1.0,
                              on_delivered=lambda f, d: ts.setdefault("t", sim.now))
        sim.run()
        assert ts["t"] == pytest.approx(2.0)
        assert sim.link_bits[("p", IN)] == pytest.approx(1.0)

    def test_staggered_last_source_gates_emit(self):
        sim = sim_with(["w0", "w1", "p"])
        ts = {}
        group = AggGroup(sim, srcs=(), dst="p", size=1.0, expected=2,
                         on_delivered=lambda f, d: ts.setdefault("t", sim.now))
        sim.at(0.0, group.start_branch, "w0")
        sim.at(5.0, group.start_branch, "w1")
        sim.run()
        assert ts["t"] >= 5.0 + 2.0 - 1e-12
        assert ts["t"] == pytest.approx(7.0)

    def test_free_hop_forwards_instantly(self):
        sim = sim_with(["w", "p"])
        ts = {}
        sim.start_aggregation(("w",), "p", 1.0, charged=False,
                              on_delivered=lambda f, d: ts.setdefault("t", sim.now))
        sim.run()
        assert ts["t"] == pytest.approx(1.0)
        # bits are still accounted on the final hop
        assert sim.link_bits[("p", IN)] == pytest.approx(1.0)

    def test_no_sources_rejected(self):
        sim = sim_with(["p"])
        with pytest.raises(ValidationError):
            sim.start_aggregation((), "p", 1.0)


class TestTopology:
    def test_from_topology_names_endpoints(self):
        sim = Simulator.from_topology(Topology(2, 1, 1e9, latency=0.1))
        assert sim.has_node(str(NodeId("worker", 0)))
        assert sim.has_node("worker1")
        assert sim.has_node("ps0")
        assert sim.latency == 0.1

    def test_topology_validation(self):
        with pytest.raises(ValidationError):
            Topology(0, 1, 1e9)
        with pytest.raises(ValidationError):
            Topology(1, 1, 0.0)
        with pytest.raises(ValidationError):
            Topology(1, 1, 1e9, latency=-1.0)


class TestBarrier:
    def test_release_at_last_signal(self):
        sim = sim_with(["a"])
        out = []
        bar = Barrier(sim, 3, lambda: out.append(sim.now))
        for t in (1.0, 2.0, 5.0):
            sim.at(t, bar.signal)
        sim.run()
        assert out == [5.0]

    def test_same_time_signals(self):
        sim = sim_with(["a"])
        out = []
        bar = Barrier(sim, 2, lambda: out.append(sim.now))
        sim.at(3.0, bar.signal)
        sim.at(3.0, bar.signal)
        sim.run()
        assert out == [3.0]

    def test_single_member_passthrough(self):
        sim = sim_with(["a"])
        out = []
        bar = Barrier(sim, 1, lambda: out.append(sim.now))
        sim.at(0.5, bar.signal)
        sim.run()
        assert out == [0.5]


class TestSendQueue:
    def test_fifo_serializes(self):
        sim = sim_with(["a", "b", "c"])
        q = SendQueue(sim, "a")
        ts = []
        q.submit_unicast("b", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        q.submit_unicast("c", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.run()
        assert ts == pytest.approx([1.0, 2.0])

    def test_release_at_transmission_not_delivery(self):
        sim = sim_with(["a", "b"], latency=0.5)
        q = SendQueue(sim, "a")
        ts = []
        q.submit_unicast("b", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        q.submit_unicast("b", 1.0, on_delivered=lambda f, d: ts.append(sim.now))
        sim.run()
        # second transfer starts at t=1 (transmission end), not t=1.5
        assert ts == pytest.approx([1.5, 2.5])


class TestMaxMin:
    def test_incast_fair_share(self):
        class F:
            def __init__(self, fid, uses):
                self.fid, self.uses = fid, uses

        caps = {}
        for i in range(5):
            caps[(f"w{i}", OUT)] = 1.0
            caps[(f"w{i}", IN)] = 1.0
        caps[("ps", OUT)] = 1.0
        caps[("ps", IN)] = 1.0
        flows = [F(i, ((f"w{i}", OUT), ("ps", IN))) for i in range(5)]
        rates = max_min_rates(flows, caps)
        assert all(r == pytest.approx(0.2) for r in rates.values())
        assert sum(rates.values()) == pytest.approx(1.0)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40)
    def test_random_allocations_work_conserving(self, seed):
        from netsim.selfcheck import check_rate_properties

        res = check_rate_properties(seed=seed, trials=3)
        assert res.passed, res.detail


class TestDeterminismAndMonotonicity:
    def test_rerun_identical(self):
        rng = random.Random(11)
        inst = random_instance(rng)
        assert run_instance_engine(inst) == run_instance_engine(inst)

    def test_raising_bandwidth_never_slower(self):
        rng = random.Random(5)
        for _ in range(10):
            inst = random_instance(rng)
            slow = run_instance_engine(inst)
            fast_inst = type(inst)(nodes=inst.nodes, rate=inst.rate * 2,
                                   jobs=inst.jobs, latency=inst.latency)
            fast = run_instance_engine(fast_inst)
            for job in slow:
                assert fast[job] <= slow[job] + 1e-9

    def test_max_min_can_reshuffle_rates_when_flows_leave(self):
        # Removing a flow is not rate-monotone for the survivors: dropping
        # a competitor of my competitor can throttle me. This pins the
        # allocator's (correct) behaviour on the canonical example.
        class F:
            def __init__(self, fid, uses):
                self.fid, self.uses = fid, uses

        caps = {(n, d): 1.0 for n in ("n0", "n1", "n2")
                for d in (OUT, IN)}
        flows = [
            F(0, (("n1", OUT), ("n2", IN))),
            F(1, (("n1", OUT), ("n2", IN))),
            F(2, (("n1", OUT), ("n0", IN))),
            F(3, (("n0", OUT), ("n2", IN))),
            F(4, (("n1", OUT), ("n0", IN))),
        ]
        rates = max_min_rates(flows, caps)
        assert rates[3] == pytest.approx(0.5)
        fewer = max_min_rates(flows[:-1], caps)
        assert fewer[3] == pytest.approx(1 / 3)
