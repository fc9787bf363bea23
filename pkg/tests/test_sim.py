"""Simulated kernel, network model, and backend semantics."""

import math

import pytest

from taskmesh.backends import CapacityExceeded, SpawnRejected, UnknownInstance, UnknownNode
from taskmesh.backends.sim import (
    CONTROL_ENDPOINT,
    NetworkProfile,
    SimBackend,
    SimKernel,
    host_export,
    run_driver,
    run_root,
)
from taskmesh.model import TaskState
from taskmesh.netfs.client import FsClient
from taskmesh.netfs.stores import MemStore
from taskmesh.tasks_builtin import REGISTRY
from taskmesh.transport import ConnectionClosed, Timeout
from tracecheck import check_decentralized

CHUNK = 65536
BW = 12_500_000.0  # bytes/s, = 100 Mbit/s


def make(seed=0, rtt=0.0, jitter=0.0, **backend_kw):
    kernel = SimKernel(seed=seed, profile=NetworkProfile(rtt=rtt, jitter=jitter))
    backend = SimBackend(kernel, REGISTRY, **backend_kw)
    return kernel, backend


class TestKernel:
    def test_sleep_advances_virtual_clock_only(self):
        kernel = SimKernel()
        seen = {}

        def body():
            kernel.sleep(250.0)
            seen["t"] = kernel.now

        kernel.spawn_strand(body)
        kernel.run()
        assert seen["t"] == 250.0

    def test_event_order_is_time_then_fifo(self):
        kernel = SimKernel()
        order = []
        kernel.schedule(5.0, lambda: order.append("b"))
        kernel.schedule(5.0, lambda: order.append("c"))
        kernel.schedule(1.0, lambda: order.append("a"))
        kernel.run()
        assert order == ["a", "b", "c"]

    def test_cancelled_timer_does_not_advance_clock(self):
        # a pending ack timeout must not inflate the measured finish time
        kernel, backend = make(seed=1, rtt=20.0)
        result, _ = run_root(kernel, backend, "add", {"a": 1, "b": 2})
        assert result.value == 3
        assert kernel.now == pytest.approx(20.0)

    def test_strand_exception_surfaces_from_run(self):
        kernel = SimKernel()

        def body():
            raise ValueError("inside strand")

        kernel.spawn_strand(body)
        with pytest.raises(ValueError, match="inside strand"):
            kernel.run()


class TestNetworkModel:
    def echo_once(self, kernel):
        """Client sends one frame to a callback echo server, waits for the reply."""
        def on_connect(server):
            server.set_handler(lambda m: m is not None and server.send(m))
        kernel.listen("echo", on_connect)
        out = {}

        def body():
            conn = kernel.connect("client", "echo")
            t0 = kernel.now
            conn.send({"type": "spawn_ack", "task_id": "t" * 32})
            conn.recv()
            out["elapsed"] = kernel.now - t0

        kernel.spawn_strand(body)
        kernel.run()
        return out["elapsed"]

    def test_request_response_costs_one_rtt(self):
        kernel = SimKernel(profile=NetworkProfile(rtt=80.0))
        assert self.echo_once(kernel) == pytest.approx(80.0)

    def test_zero_rtt_is_instant(self):
        kernel = SimKernel(profile=NetworkProfile(rtt=0.0))
        assert self.echo_once(kernel) == pytest.approx(0.0)

    def test_jitter_only_delays(self):
        base = self.echo_once(SimKernel(seed=7, profile=NetworkProfile(rtt=80.0)))
        jittered = self.echo_once(
            SimKernel(seed=7, profile=NetworkProfile(rtt=80.0, jitter=30.0)))
        assert jittered >= base

    def test_connect_without_listener_fails(self):
        kernel = SimKernel()

        def body():
            with pytest.raises(ConnectionClosed):
                kernel.connect("client", "nowhere")

        kernel.spawn_strand(body)
        kernel.run()

    def test_frames_sent_before_close_still_arrive(self):
        kernel = SimKernel(profile=NetworkProfile(rtt=40.0))
        got = []

        def on_connect(server):
            def on_msg(msg):
                got.append(msg)
            server.set_handler(on_msg)
        kernel.listen("sink", on_connect)

        def body():
            conn = kernel.connect("client", "sink")
            conn.send({"type": "spawn_ack", "task_id": "a" * 32})
            conn.send({"type": "spawn_ack", "task_id": "b" * 32})
            conn.close()

        kernel.spawn_strand(body)
        kernel.run()
        assert [m["task_id"][0] for m in got if m is not None] == ["a", "b"]
        assert got[-1] is None

    def test_force_close_drops_queued_frames(self):
        kernel = SimKernel(profile=NetworkProfile(rtt=40.0))
        got = []

        def on_connect(server):
            server.set_handler(lambda m: got.append(m))
        kernel.listen("sink", on_connect)

        def body():
            conn = kernel.connect("client", "sink")
            conn.send({"type": "spawn_ack", "task_id": "a" * 32})
            conn.force_close()

        kernel.spawn_strand(body)
        kernel.run()
        assert [m for m in got if m is not None] == []


def read_access_times(size, window, rtt, seed=0):
    """Virtual open+read times for one file of `size` via the fs client."""
    kernel = SimKernel(seed=seed, profile=NetworkProfile(rtt=rtt))
    backend = SimBackend(kernel, REGISTRY)
    store = MemStore()
    store.create(["data.bin"], 0o644, 0)
    store.write_range(["data.bin"], 0, b"\x00" * size, 0)
    host_export(kernel, "vol-x", store)
    out = {}

    def body(ctx):
        conn = ctx.host.connect("vol-x")
        fs = FsClient(conn, session_id="s1", clock=ctx.host.clock_ms)
        t0 = ctx.host.clock_ms()
        fh, attr = fs.open("data.bin")
        t1 = ctx.host.clock_ms()
        data = fs.read_fh(fh, attr["size"], window=window)
        t2 = ctx.host.clock_ms()
        fs.release(fh)
        out.update(open_ms=t1 - t0, read_ms=t2 - t1, n=len(data))
        return True

    run_driver(kernel, backend, body)
    assert out["n"] == size
    return out


def model_read_ms(size, window, rtt):
    rounds = math.ceil(math.ceil(size / CHUNK) / window)
    return rounds * rtt + size / BW * 1000.0


class TestTransferModel:
    @pytest.mark.parametrize("size,window,rtt", [
        (CHUNK, 1, 100.0),
        (1 << 20, 1, 100.0),
        (1 << 20, 16, 100.0),
        (1 << 20, 16, 20.0),
        (10 << 20, 16, 20.0),
        (100 << 10, 4, 50.0),
        (1 << 20, 16, 0.0),
    ])
    def test_measured_read_matches_closed_form_exactly(self, size, window, rtt):
        out = read_access_times(size, window, rtt)
        assert out["read_ms"] == pytest.approx(model_read_ms(size, window, rtt), rel=1e-9)
        assert out["open_ms"] == pytest.approx(rtt, rel=1e-9)

    def test_window_one_misses_the_second_budget_at_high_rtt(self):
        out = read_access_times(1 << 20, 1, 100.0)
        assert out["open_ms"] + out["read_ms"] > 1000.0

    def test_window_sixteen_meets_the_second_budget(self):
        out = read_access_times(1 << 20, 16, 100.0)
        assert out["open_ms"] + out["read_ms"] < 1000.0
        assert out["read_ms"] == pytest.approx(183.88608)


class TestDeterminism:
    def workflow_trace(self, seed):
        kernel, backend = make(seed=seed, rtt=30.0, jitter=5.0)
        result, _ = run_root(kernel, backend, "diamond_root")
        assert result.value == 30
        return kernel.trace

    def test_same_seed_same_trace(self):
        assert self.workflow_trace(42) == self.workflow_trace(42)

    def test_different_seed_different_trace(self):
        assert self.workflow_trace(1) != self.workflow_trace(2)

    def test_trace_times_nondecreasing(self):
        trace = self.workflow_trace(9)
        times = [t for t, *_ in trace]
        assert times == sorted(times)


class TestBackend:
    def test_capacity_cap_rejects_spawn(self):
        kernel, backend = make(rtt=0.0, capacity=2)

        def body(ctx):
            ctx.spawn("idle", {"ms": 10_000})
            ctx.spawn("idle", {"ms": 10_000})
            with pytest.raises(SpawnRejected, match="capacity"):
                ctx.spawn("idle", {"ms": 10_000})
            return True

        run_driver(kernel, backend, body)

    def test_capacity_counts_only_live_instances(self):
        kernel, backend = make(rtt=0.0, capacity=1)

        def body(ctx):
            first = ctx.spawn("add", {"a": 1, "b": 1})
            assert ctx.await_result(first).value == 2
            second = ctx.spawn("add", {"a": 2, "b": 2})
            return ctx.await_result(second).value

        value, _ = run_driver(kernel, backend, body)
        assert value == 4

    def test_unknown_placement_node(self):
        kernel, backend = make(nodes=("node-0", "node-1"))

        def body(ctx):
            with pytest.raises(SpawnRejected, match="node-9"):
                ctx.spawn("add", {"a": 1, "b": 2}, placement="node-9")
            handle = ctx.spawn("add", {"a": 1, "b": 2}, placement="node-1")
            rows = backend.list_instances()
            assert rows and rows[0]["node"] == "node-1"
            return ctx.await_result(handle).value

        value, _ = run_driver(kernel, backend, body)
        assert value == 3

    def test_finished_rows_stay_until_destroyed(self):
        kernel, backend = make()

        def body(ctx):
            handle = ctx.spawn("add", {"a": 2, "b": 3})
            ctx.await_result(handle)
            kernel.sleep(1.0)  # let the child's final events drain
            (row,) = backend.list_instances()
            assert row["state"] is TaskState.COMPLETED
            backend.destroy_instance(row["instance"])
            assert backend.list_instances() == []
            assert backend.instance_state(handle.task) is TaskState.COMPLETED
            return True

        run_driver(kernel, backend, body)

    def test_destroy_running_instance_cancels(self):
        kernel, backend = make(rtt=10.0)

        def body(ctx):
            handle = ctx.spawn("idle", {"ms": 60_000})
            kernel.sleep(100.0)
            (row,) = backend.list_instances()
            assert row["state"] is TaskState.RUNNING
            backend.destroy_instance(row["instance"])
            result = ctx.await_result(handle)
            assert not result.ok
            assert result.error["code"] == "canceled"
            assert handle.state is TaskState.CANCELED
            assert backend.instance_state(handle.task) is TaskState.CANCELED
            return True

        run_driver(kernel, backend, body)

    def test_destroy_unknown_instance(self):
        kernel, backend = make()

        def body(ctx):
            with pytest.raises(UnknownInstance):
                backend.destroy_instance("i-9999")
            return True

        run_driver(kernel, backend, body)

    def test_direct_create_instance_errors(self):
        kernel, backend = make(capacity=0)
        from taskmesh.model import TaskSpec
        spec = TaskSpec(name="t", entrypoint="add", inputs={"a": 1, "b": 2})
        with pytest.raises(CapacityExceeded):
            backend.create_instance(spec, None, env={})
        spec2 = TaskSpec(name="t", entrypoint="add", placement="ghost")
        with pytest.raises(UnknownNode):
            backend.create_instance(spec2, None, env={})

    def test_workspace_without_broker_is_rejected(self):
        kernel, backend = make()

        def body(ctx):
            with pytest.raises(SpawnRejected, match="broker"):
                ctx.spawn("read_workspace", workspace="vol-1")
            return True

        run_driver(kernel, backend, body)


class TestTraceProperties:
    def test_diamond_trace_is_decentralized(self):
        kernel, backend = make(seed=3, rtt=25.0)
        result, _ = run_root(kernel, backend, "diamond_root")
        assert result.value == 30
        spawned, checked = check_decentralized(kernel.trace)
        assert spawned == 7  # root + 2 mappers + 4 leaves
        assert checked >= 7 * 3  # hello, status, terminal for each

    def test_nested_arithmetic_trace_is_decentralized(self):
        plan = {"op": "add", "args": [
            {"op": "mul", "args": [{"op": "const", "value": 3},
                                   {"op": "const", "value": 4}]},
            {"op": "sub", "args": [{"op": "const", "value": 10},
                                   {"op": "const", "value": 6}]},
        ]}
        kernel, backend = make(seed=4, rtt=10.0)
        result, _ = run_root(kernel, backend, "arith_node", {"plan": plan})
        assert result.value == 16
        check_decentralized(kernel.trace)

    def test_spawn_requests_target_backend_only(self):
        kernel, backend = make(seed=5, rtt=10.0)
        run_root(kernel, backend, "diamond_root")
        import json
        for t, src, dst, summary in kernel.trace:
            if isinstance(summary, bytes) and b'"spawn_request"' in summary:
                assert dst == CONTROL_ENDPOINT
                assert json.loads(summary)["parent_endpoint"] == src
