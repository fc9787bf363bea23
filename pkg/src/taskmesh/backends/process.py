"""OS-process backend: every task instance is a real child process.

The backend runs a TCP control listener. Task runtimes connect to it to
send spawn_request frames; the backend execs one process per instance
with its spec, parent endpoint, and control endpoint in the environment,
then acks. Result and log frames never touch the backend: the child
connects straight to its parent's listener.

The backend's view of an instance is process-level: running while the
child lives, completed or failed from its exit code, canceled when
destroyed. destroy marks the record canceled before the kill so a parent
diagnosing the dropped connection always sees the cancellation.
"""

import itertools
import json
import os
import random
import subprocess
import sys
import threading
import time

from .. import transport, wire
from ..model import TERMINAL_STATES, TaskSpec, TaskState, new_task_id, validate_spec
from ..transport import ConnectionClosed, TcpListener, ThreadChannel, TransportError
from . import BackendError, SpawnRejected, UnknownInstance

DEFAULT_COMMAND = (sys.executable, "-m", "taskmesh", "serve-task")


def _now_ms() -> float:
    return time.monotonic() * 1000.0


class ProcessBackend:
    def __init__(self, command=None, extra_env: dict | None = None, broker=None):
        self.command = tuple(command or DEFAULT_COMMAND)
        self.extra_env = dict(extra_env or {})
        self.broker = broker
        self._instances: dict[str, dict] = {}
        self._states: dict[str, TaskState] = {}
        self._counter = itertools.count(1)
        self._lock = threading.RLock()
        self._listener = TcpListener()
        self.control_endpoint = self._listener.endpoint
        self._closing = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="backend-accept", daemon=True)
        self._accept_thread.start()

    # -- control endpoint ------------------------------------------------------

    def _accept_loop(self):
        while not self._closing:
            try:
                conn = self._listener.accept(timeout=0.2)
            except transport.Timeout:
                continue
            except (ConnectionClosed, OSError):
                return
            threading.Thread(target=self._serve_control, args=(conn,),
                             name="backend-control", daemon=True).start()

    def _serve_control(self, conn):
        try:
            while True:
                msg = conn.recv()
                if msg["type"] == "spawn_request":
                    self._handle_spawn(conn, msg)
                elif msg["type"] == "volume_rpc" and "method" in msg:
                    self._handle_rpc(conn, msg)
        except (ConnectionClosed, TransportError, OSError):
            pass
        finally:
            conn.close()

    def _handle_spawn(self, conn, msg):
        spec_doc = msg["spec"]
        try:
            self.create_instance(TaskSpec.from_doc(spec_doc),
                                 msg.get("parent_endpoint"), env={})
        except BackendError as exc:
            conn.send(wire.task_fail(spec_doc["id"], "spawn-rejected", str(exc)))
        else:
            conn.send(wire.spawn_ack(spec_doc["id"]))

    def _handle_rpc(self, conn, msg):
        if msg["method"] == "instance_state":
            state = self.instance_state(msg["params"].get("task", ""))
            result = {"state": None if state is None else state.value}
            conn.send(wire.volume_ok(msg["seq"], result))
        else:
            conn.send(wire.volume_err(msg["seq"], "unknown-method", msg["method"]))

    # -- backend surface ----------------------------------------------------------

    def create_instance(self, spec: TaskSpec, parent_endpoint: str | None,
                        env: dict) -> str:
        violations = validate_spec(spec)
        if violations:
            raise SpawnRejected(f"invalid spec: {violations[0]['code']}")
        if parent_endpoint is None:
            raise SpawnRejected("no parent endpoint to report back to")
        child_env = dict(os.environ)
        child_env.update(self.extra_env)
        child_env.update(env)
        if spec.workspace is not None:
            if self.broker is None:
                raise SpawnRejected("workspace requested but no volume broker")
            mount = self.broker.publish_volume(spec.workspace, spec.id)
            child_env["TASKMESH_MOUNT"] = wire.canonical_doc(mount).decode("utf-8")
        child_env["TASKMESH_PARENT"] = parent_endpoint
        child_env["TASKMESH_TASK_ID"] = spec.id
        child_env["TASKMESH_SPEC"] = wire.canonical_doc(spec.to_doc()).decode("utf-8")
        child_env["TASKMESH_BACKEND"] = self.control_endpoint
        with self._lock:
            instance_id = f"p-{next(self._counter):04d}"
            try:
                proc = subprocess.Popen(self.command, env=child_env)
            except OSError as exc:
                raise SpawnRejected(f"exec failed: {exc}") from exc
            record = {"instance": instance_id, "task": spec.id,
                      "node": spec.placement or "local",
                      "state": TaskState.RUNNING, "proc": proc}
            self._instances[instance_id] = record
            self._states[spec.id] = TaskState.RUNNING
        threading.Thread(target=self._reap, args=(record,),
                         name=f"reap-{instance_id}", daemon=True).start()
        return instance_id

    def _reap(self, record):
        code = record["proc"].wait()
        with self._lock:
            if record["state"] not in TERMINAL_STATES:
                state = TaskState.COMPLETED if code == 0 else TaskState.FAILED
                record["state"] = state
                self._states[record["task"]] = state

    def destroy_instance(self, instance_id: str):
        with self._lock:
            record = self._instances.get(instance_id)
            if record is None:
                raise UnknownInstance(instance_id)
            if record["state"] not in TERMINAL_STATES:
                record["state"] = TaskState.CANCELED
                self._states[record["task"]] = TaskState.CANCELED
            del self._instances[instance_id]
        record["proc"].kill()
        record["proc"].wait()

    def list_instances(self) -> list[dict]:
        with self._lock:
            return [{"instance": r["instance"], "task": r["task"],
                     "node": r["node"], "state": r["state"]}
                    for r in self._instances.values()]

    def instance_state(self, task_id: str) -> TaskState | None:
        with self._lock:
            return self._states.get(task_id)

    def close(self):
        self._closing = True
        self._listener.close()
        with self._lock:
            live = list(self._instances.values())
            self._instances.clear()
        for record in live:
            record["proc"].kill()
            record["proc"].wait()


class ProcessHost:
    """Runtime adapter over real sockets; used by drivers and child processes."""

    def __init__(self, control_endpoint: str | None, env=None, seed=None):
        self.env = os.environ if env is None else env
        self.rng = random.Random(seed)
        self.trace_sink = None
        self._control_endpoint = control_endpoint
        self._control = None
        self._rpc_seq = itertools.count(1)
        self._children: dict[str, ThreadChannel] = {}
        self._tokens: dict[str, str | None] = {}
        self._conns: list = []
        self._lock = threading.RLock()
        self._closing = False
        self._listener = TcpListener()
        self.self_endpoint = self._listener.endpoint
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="host-accept", daemon=True)
        self._accept_thread.start()

    def clock_ms(self) -> float:
        return _now_ms()

    def sleep(self, ms: float):
        time.sleep(ms / 1000.0)

    # -- children -------------------------------------------------------------

    def register_child(self, task_id: str, token: str | None) -> ThreadChannel:
        channel = ThreadChannel()
        with self._lock:
            self._children[task_id] = channel
            self._tokens[task_id] = token
        return channel

    def unregister_child(self, task_id: str):
        with self._lock:
            self._children.pop(task_id, None)
            self._tokens.pop(task_id, None)

    def _accept_loop(self):
        while not self._closing:
            try:
                conn = self._listener.accept(timeout=0.2)
            except transport.Timeout:
                continue
            except (ConnectionClosed, OSError):
                return
            with self._lock:
                self._conns.append(conn)
            threading.Thread(target=self._pump, args=(conn,),
                             name="host-pump", daemon=True).start()

    def _pump(self, conn):
        bound = None
        try:
            while True:
                msg = conn.recv()
                if bound is None:
                    with self._lock:
                        known = msg.get("task_id") in self._children
                        token_ok = known and (
                            self._tokens.get(msg["task_id"]) == msg.get("token"))
                    if msg["type"] != "hello" or not known or not token_ok:
                        return
                    bound = msg["task_id"]
                    self._sink("recv", f"task:{bound}", msg)
                    continue
                self._sink("recv", f"task:{bound}", msg)
                with self._lock:
                    channel = self._children.get(bound)
                if channel is not None:
                    channel.put(msg)
        except (ConnectionClosed, TransportError, OSError):
            pass
        finally:
            conn.close()
            if bound is not None:
                with self._lock:
                    channel = self._children.get(bound)
                if channel is not None:
                    channel.close()

    def _sink(self, direction: str, peer: str, msg: dict):
        if self.trace_sink is not None:
            self.trace_sink.append({"dir": direction, "peer": peer, "msg": msg})

    # -- backend control -------------------------------------------------------

    def _control_conn(self):
        if self._control is None:
            if self._control_endpoint is None:
                raise SpawnRejected("no backend control endpoint configured")
            self._control = transport.connect(self._control_endpoint)
        return self._control

    def spawn(self, spec_doc: dict, ack_timeout: float = 10.0):
        conn = self._control_conn()
        request = wire.spawn_request(spec_doc, parent_endpoint=self.self_endpoint)
        self._sink("send", "backend", request)
        conn.send(request)
        reply = conn.recv(timeout=ack_timeout)
        self._sink("recv", "backend", reply)
        if reply["type"] != "spawn_ack":
            raise SpawnRejected(reply.get("error", {}).get("message", "refused"))

    def instance_state(self, task_id: str) -> TaskState | None:
        try:
            conn = self._control_conn()
            seq = next(self._rpc_seq)
            conn.send(wire.volume_call(seq, "instance_state", {"task": task_id}))
            reply = conn.recv(timeout=10.0)
        except (SpawnRejected, TransportError, OSError):
            return None
        state = reply.get("result", {}).get("state")
        return None if state is None else TaskState(state)

    def connect(self, endpoint: str):
        conn = transport.connect(endpoint)
        with self._lock:
            self._conns.append(conn)
        return conn

    def shutdown(self, force: bool = False):
        self._closing = True
        self._listener.close()
        with self._lock:
            conns = list(self._conns)
            channels = list(self._children.values())
        if self._control is not None:
            self._control.close()
        for conn in conns:
            conn.close()
        for channel in channels:
            channel.close()


def serve_child(environ=None) -> int:
    """Entry point for a spawned instance; returns the process exit code."""
    from ..runtime import serve_task
    from ..tasks_builtin import REGISTRY

    environ = os.environ if environ is None else environ
    spec = TaskSpec.from_doc(json.loads(environ["TASKMESH_SPEC"]))
    host = ProcessHost(environ.get("TASKMESH_BACKEND"), env=environ)
    try:
        conn = transport.connect(environ["TASKMESH_PARENT"])
    except (TransportError, OSError):
        return 1
    try:
        return serve_task(REGISTRY, spec, conn, host=host,
                          token=environ.get("TASKMESH_TOKEN"))
    finally:
        host.shutdown()
        conn.close()


def run_driver(backend: ProcessBackend, body, registry=None, seed=None):
    """Run `body(ctx)` as the workflow driver on the calling thread."""
    from ..runtime import RuntimeContext
    from ..tasks_builtin import REGISTRY

    host = ProcessHost(backend.control_endpoint, seed=seed)
    ctx = RuntimeContext(new_task_id(host.rng), host, registry or REGISTRY)
    try:
        return body(ctx), ctx
    finally:
        host.shutdown()


def run_root(backend: ProcessBackend, entrypoint: str, inputs: dict | None = None,
             timeout: float | None = None, seed=None):
    """Spawn one root task and await it; returns (TaskResult, driver ctx)."""
    def body(ctx):
        handle = ctx.spawn(entrypoint, inputs or {})
        return ctx.await_result(handle, timeout=timeout)

    return run_driver(backend, body, seed=seed)
