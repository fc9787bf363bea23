"""Per-task runtime: spawning children, awaiting results, serving a body.

A runtime talks to the world through a host adapter (simulated or OS
process backed) with one contract:

    self_endpoint      address children use to connect back here
    register_child(id, token) -> channel of that child's frames
    unregister_child(id)
    spawn(spec_doc)    request instance creation; raises on refusal
    connect(endpoint)  open a framed connection (workspace mounts)
    instance_state(id) backend's view, for diagnosing dropped children
    env, rng, clock_ms, trace_sink

Subtask creation goes straight from the spawning task's runtime to the
backend; no frame ever passes through another task. Every frame sent or
received lands in the context's trace with direction and peer.
"""

import json

from . import wire
from .model import TaskResult, TaskSpec, TaskState, new_task_id, validate_spec
from .netfs.client import FsClient
from .transport import ChannelClosed, ConnectionClosed, Timeout


class UnknownEntrypoint(Exception):
    pass


class TaskHandle:
    """Parent-side view of one spawned child."""

    def __init__(self, task_id: str, channel):
        self.task = task_id
        self.channel = channel
        self.state = TaskState.SCHEDULED
        self.logs: list[tuple[str, str]] = []
        self.result: TaskResult | None = None


class Workspace:
    """Task-side view of a mounted volume; paths live under the mount point."""

    def __init__(self, fs: FsClient, mount_path: str = "/workspace"):
        self.fs = fs
        self.mount_path = mount_path.rstrip("/")

    def _map(self, path: str) -> str:
        if path == self.mount_path or path.startswith(self.mount_path + "/"):
            path = path[len(self.mount_path):]
        return path or "/"

    def read_file(self, path: str) -> bytes:
        return self.fs.read_file(self._map(path), window=16)

    def write_file(self, path: str, data: bytes):
        self.fs.write_file(self._map(path), data)

    def listdir(self, path: str = "/") -> list[str]:
        return self.fs.readdir(self._map(path))

    def getattr(self, path: str) -> dict:
        return self.fs.getattr(self._map(path))


class RuntimeContext:
    def __init__(self, self_id: str, host, registry: dict,
                 parent_conn=None, spec: TaskSpec | None = None):
        self.self_id = self_id
        self.host = host
        self.registry = registry
        self.parent_conn = parent_conn
        self.spec = spec
        self.inputs = spec.inputs if spec is not None else {}
        self.trace: list[dict] = []
        self._workspace: Workspace | None = None
        host.trace_sink = self.trace

    # -- spawning ----------------------------------------------------------------

    def spawn(self, entrypoint: str, inputs: dict | None = None, *,
              name: str | None = None, placement: str | None = None,
              workspace: str | None = None) -> TaskHandle:
        spec = TaskSpec(
            name=name or entrypoint,
            entrypoint=entrypoint,
            inputs=inputs or {},
            id=new_task_id(self.host.rng),
            parent=self.self_id,
            placement=placement,
            workspace=workspace,
        )
        return self.spawn_spec(spec)

    def spawn_spec(self, spec: TaskSpec) -> TaskHandle:
        if spec.parent is None:
            spec.parent = self.self_id
        violations = validate_spec(spec)
        if violations:
            raise ValueError(f"invalid spec: {violations}")
        if spec.parent != self.self_id:
            raise ValueError("spec.parent must be the spawning task")
        channel = self.host.register_child(spec.id, token=None)
        try:
            self.host.spawn(spec.to_doc())
        except BaseException:
            self.host.unregister_child(spec.id)
            raise
        return TaskHandle(spec.id, channel)

    def await_result(self, handle: TaskHandle, timeout: float | None = None) -> TaskResult:
        """Block until the child reaches a terminal frame or the timeout hits.

        Timing out leaves the handle awaitable. A dropped connection after
        the child's hello is diagnosed through the backend (canceled vs
        connection-lost); a child that dies before ever saying hello is
        only detectable by awaiting with a timeout.
        """
        if handle.result is not None:
            return handle.result
        for kind in self._frames(handle, timeout):
            if kind == "terminal":
                return handle.result
        return self._closed_without_terminal(handle)

    def await_log(self, handle: TaskHandle, timeout: float | None = None):
        """Block until the child logs a line (returned as (stream, text)).

        Returns None if the child reaches a terminal frame, or the
        connection drops, before logging anything further.
        """
        if handle.result is not None:
            return None
        for kind in self._frames(handle, timeout):
            if kind == "log":
                return handle.logs[-1]
            if kind == "terminal":
                return None
        self._closed_without_terminal(handle)
        return None

    def _frames(self, handle: TaskHandle, timeout: float | None):
        """Yield dispatched frame kinds until the channel closes; Timeout raises."""
        start = self.host.clock_ms()
        while True:
            remaining = None
            if timeout is not None:
                remaining = timeout - (self.host.clock_ms() - start) / 1000.0
                if remaining < 0:
                    raise Timeout()
            try:
                msg = handle.channel.get(remaining)
            except ChannelClosed:
                return
            yield self._dispatch(handle, msg)

    def _dispatch(self, handle: TaskHandle, msg: dict) -> str | None:
        kind = msg["type"]
        if kind == "status":
            handle.state = TaskState(msg["state"])
        elif kind == "log":
            handle.logs.append((msg["stream"], msg["text"]))
            return "log"
        elif kind == "return":
            handle.state = TaskState.COMPLETED
            handle.result = TaskResult.completed(handle.task, msg["value"])
            return "terminal"
        elif kind == "fail":
            handle.state = TaskState.FAILED
            handle.result = TaskResult(task=handle.task, error=dict(msg["error"]))
            return "terminal"
        return None

    def _closed_without_terminal(self, handle: TaskHandle) -> TaskResult:
        state = self.host.instance_state(handle.task)
        if state is TaskState.CANCELED:
            handle.state = TaskState.CANCELED
            handle.result = TaskResult.failed(handle.task, "canceled",
                                              "instance destroyed")
        else:
            handle.state = TaskState.FAILED
            handle.result = TaskResult.failed(handle.task, "connection-lost",
                                              "child connection closed without a result")
        return handle.result

    def call(self, entrypoint: str, inputs: dict | None = None,
             timeout: float | None = None, **spawn_kwargs):
        """Spawn, await, unwrap: returns the child's value or raises its error."""
        handle = self.spawn(entrypoint, inputs, **spawn_kwargs)
        result = self.await_result(handle, timeout=timeout)
        if not result.ok:
            raise ChildFailed(result.error)
        return result.value

    # -- task-side helpers ----------------------------------------------------------

    def log(self, text: str, stream: str = "out"):
        if self.parent_conn is None:
            return
        self._send_parent(wire.log(self.self_id, stream, text))

    def workspace(self) -> Workspace | None:
        if self._workspace is not None:
            return self._workspace
        raw = self.host.env.get("TASKMESH_MOUNT")
        if raw is None:
            return None
        mount = json.loads(raw)
        conn = self.host.connect(mount["endpoint"])
        fs = FsClient(conn, session_id=self.self_id, token=mount.get("token"),
                      clock=self.host.clock_ms)
        self._workspace = Workspace(fs, mount.get("mount_path", "/workspace"))
        return self._workspace

    def _send_parent(self, msg: dict):
        self.trace.append({"dir": "send", "peer": "parent", "msg": msg})
        self.parent_conn.send(msg)


class ChildFailed(Exception):
    def __init__(self, error: dict):
        super().__init__(f"{error.get('code')}: {error.get('message', '')}")
        self.error = error


def resolve_entrypoint(registry: dict, name: str):
    body = registry.get(name)
    if body is not None:
        return body
    if ":" in name:
        module_name, _, attr = name.partition(":")
        try:
            import importlib
            module = importlib.import_module(module_name)
            return getattr(module, attr)
        except (ImportError, AttributeError):
            pass
    raise UnknownEntrypoint(name)


def serve_task(registry: dict, spec: TaskSpec, parent_conn, *,
               host, token: str | None = None, on_state=lambda s: None) -> int:
    """Child side: hello, status(running), body, terminal frame.

    Returns 0 iff a return frame was sent. The upstream connection is the
    only place frames go; nothing follows the terminal frame.
    """
    ctx = RuntimeContext(spec.id, host, registry, parent_conn=parent_conn, spec=spec)
    try:
        ctx._send_parent(wire.hello(spec.id, token=token))
        ctx._send_parent(wire.status(spec.id, TaskState.RUNNING.value))
        on_state(TaskState.RUNNING)
        try:
            body = resolve_entrypoint(registry, spec.entrypoint)
        except UnknownEntrypoint:
            ctx._send_parent(wire.task_fail(spec.id, "unknown-entrypoint", spec.entrypoint))
            on_state(TaskState.FAILED)
            return 1
        try:
            value = body(ctx, **spec.inputs)
        except ChildFailed as exc:
            ctx._send_parent(wire.task_fail(spec.id, "task-failed", str(exc)))
            on_state(TaskState.FAILED)
            return 1
        except Exception as exc:
            ctx._send_parent(wire.task_fail(
                spec.id, "task-failed", f"{type(exc).__name__}: {exc}"))
            on_state(TaskState.FAILED)
            return 1
        if not wire.is_document(value):
            ctx._send_parent(wire.task_fail(
                spec.id, "non-encodable", f"value of type {type(value).__name__}"))
            on_state(TaskState.FAILED)
            return 1
        ctx._send_parent(wire.task_return(spec.id, value))
        on_state(TaskState.COMPLETED)
        return 0
    except (ConnectionClosed, ChannelClosed):
        on_state(TaskState.FAILED)
        return 1
