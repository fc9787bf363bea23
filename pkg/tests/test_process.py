"""Process backend: real child processes, real sockets."""

import time

import pytest

from taskmesh.backends import SpawnRejected, UnknownInstance
from taskmesh.backends.process import ProcessBackend, run_driver, run_root
from taskmesh.model import TaskSpec, TaskState
from taskmesh.tasks_builtin import REGISTRY


@pytest.fixture
def backend():
    b = ProcessBackend()
    yield b
    b.close()


def wait_for(predicate, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(0.02)
    raise AssertionError("condition not reached in time")


def wait_running(ctx, handle, timeout=10.0):
    """Pump frames until the child has said hello and reported running."""
    from taskmesh.transport import Timeout

    deadline = time.monotonic() + timeout
    while handle.state is not TaskState.RUNNING:
        assert time.monotonic() < deadline, "child never reached running"
        try:
            ctx.await_result(handle, timeout=0.05)
        except Timeout:
            pass


class TestBasics:
    def test_add(self, backend):
        result, _ = run_root(backend, "add", {"a": 1, "b": 2})
        assert result.ok and result.value == 3

    def test_diamond(self, backend):
        result, _ = run_root(backend, "diamond_root")
        assert result.value == 30

    def test_logs_in_order(self, backend):
        def body(ctx):
            handle = ctx.spawn("log_lines", {"lines": ["a", "b"], "stream": "out"})
            result = ctx.await_result(handle)
            return result.value, handle.logs

        (count, logs), _ = run_driver(backend, body)
        assert count == 2 and logs == [("out", "a"), ("out", "b")]

    def test_unknown_entrypoint(self, backend):
        result, _ = run_root(backend, "nope")
        assert result.error == {"code": "unknown-entrypoint", "message": "nope"}

    def test_body_failure(self, backend):
        result, _ = run_root(backend, "boom", {"message": "pop"})
        assert result.error["code"] == "task-failed"
        assert "pop" in result.error["message"]

    def test_module_entrypoint_resolves_in_child(self, backend):
        result, _ = run_root(backend, "taskmesh.tasks_builtin:shout", {"text": "ok"})
        assert result.value == "OK"

    def test_concurrent_children(self, backend):
        def body(ctx):
            handles = [ctx.spawn("add", {"a": i, "b": i}) for i in range(8)]
            return [ctx.await_result(h).value for h in handles]

        values, _ = run_driver(backend, body)
        assert values == [0, 2, 4, 6, 8, 10, 12, 14]

    def test_driver_trace_is_direct(self, backend):
        def body(ctx):
            handle = ctx.spawn("add", {"a": 1, "b": 1})
            ctx.await_result(handle)
            return True

        _, ctx = run_driver(backend, body)
        sends = [e for e in ctx.trace if e["dir"] == "send"]
        assert all(e["peer"] == "backend" for e in sends)
        recv_kinds = [e["msg"]["type"] for e in ctx.trace
                      if e["dir"] == "recv" and e["peer"].startswith("task:")]
        assert recv_kinds[0] == "hello" and recv_kinds[-1] == "return"


class TestInstanceTable:
    def test_exit_codes_map_to_states(self, backend):
        def body(ctx):
            ok = ctx.spawn("add", {"a": 0, "b": 0})
            bad = ctx.spawn("boom")
            ctx.await_result(ok)
            ctx.await_result(bad)
            return ok.task, bad.task

        (ok_task, bad_task), _ = run_driver(backend, body)
        wait_for(lambda: backend.instance_state(ok_task) is TaskState.COMPLETED)
        wait_for(lambda: backend.instance_state(bad_task) is TaskState.FAILED)
        states = {r["task"]: r["state"] for r in backend.list_instances()}
        assert states[ok_task] is TaskState.COMPLETED
        assert states[bad_task] is TaskState.FAILED

    def test_destroy_yields_canceled_result(self, backend):
        def body(ctx):
            handle = ctx.spawn("idle", {"ms": 60_000})
            wait_running(ctx, handle)
            (row,) = [r for r in backend.list_instances() if r["task"] == handle.task]
            backend.destroy_instance(row["instance"])
            result = ctx.await_result(handle, timeout=10.0)
            return result.error["code"], handle.state

        (code, state), _ = run_driver(backend, body)
        assert code == "canceled"
        assert state is TaskState.CANCELED
        assert backend.list_instances() == []

    def test_external_kill_yields_connection_lost(self, backend):
        def body(ctx):
            handle = ctx.spawn("idle", {"ms": 60_000})
            wait_running(ctx, handle)
            (record,) = [r for r in backend._instances.values()
                         if r["task"] == handle.task]
            record["proc"].kill()
            result = ctx.await_result(handle, timeout=10.0)
            return result.error["code"], handle.task

        (code, task), _ = run_driver(backend, body)
        assert code == "connection-lost"
        wait_for(lambda: backend.instance_state(task) is TaskState.FAILED)

    def test_destroy_unknown(self, backend):
        with pytest.raises(UnknownInstance):
            backend.destroy_instance("p-9999")


class TestSpawnRefusals:
    def test_invalid_spec(self, backend):
        spec = TaskSpec(name="", entrypoint="add")
        with pytest.raises(SpawnRejected, match="invalid spec"):
            backend.create_instance(spec, "127.0.0.1:1", env={})

    def test_missing_parent_endpoint(self, backend):
        spec = TaskSpec(name="t", entrypoint="add", inputs={"a": 1, "b": 2})
        with pytest.raises(SpawnRejected, match="parent"):
            backend.create_instance(spec, None, env={})

    def test_workspace_without_broker(self, backend):
        def body(ctx):
            with pytest.raises(SpawnRejected, match="broker"):
                ctx.spawn("read_workspace", workspace="vol-1")
            return True

        run_driver(backend, body)

    def test_exec_failure(self):
        backend = ProcessBackend(command=("/nonexistent-interpreter",))
        try:
            def body(ctx):
                with pytest.raises(SpawnRejected, match="exec failed"):
                    ctx.spawn("add", {"a": 1, "b": 2})
                return True

            run_driver(backend, body)
        finally:
            backend.close()
