"""Deterministic in-memory backend: virtual clock, simulated network.

Everything runs off one event heap. Task bodies execute on cooperative
strands (daemon threads the kernel resumes one at a time with a strict
semaphore handoff), so there is exactly one active entity at any moment
and a seeded run reproduces the same frame order and virtual timestamps
bit for bit.

Network model, per connection and direction: a frame's arrival is
    start = max(now, free_at)          # bandwidth serialization
    arrival = start + bulk/bandwidth + rtt/2 + jitter
with free_at advanced by the transmit time and arrivals clamped FIFO.
Only declared payload bytes (fs read/write data) count as bulk; control
frames cost latency only. That makes measured transfer times match the
closed-form model exactly when jitter is zero.
"""

import heapq
import itertools
import random
import threading
from collections import deque
from dataclasses import dataclass

from .. import wire
from ..model import TaskSpec, TaskState, TERMINAL_STATES, validate_spec
from ..transport import ChannelClosed, ConnectionClosed, Timeout
from . import CapacityExceeded, SpawnRejected, UnknownInstance, UnknownNode

CONTROL_ENDPOINT = "backend"


@dataclass
class NetworkProfile:
    rtt: float = 0.0           # round-trip latency budget, ms
    bandwidth: float = 12_500_000.0  # bytes per second (100 Mbit/s)
    jitter: float = 0.0        # extra uniform [0, jitter] ms per delivery

    def __post_init__(self):
        if self.rtt < 0 or self.bandwidth <= 0 or self.jitter < 0:
            raise ValueError("invalid network profile")


class _Strand:
    def __init__(self, fn, name: str):
        self._go = threading.Semaphore(0)
        self._yielded = threading.Semaphore(0)
        self.name = name
        self.done = False
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._main, args=(fn,),
                                        name=f"sim:{name}", daemon=True)
        self._thread.start()

    def _main(self, fn):
        self._go.acquire()
        try:
            fn()
        except (ChannelClosed, ConnectionClosed):
            pass  # torn down under the body; expected on destroy
        except BaseException as exc:  # surfaced by kernel.run
            self.error = exc
        finally:
            self.done = True
            self._yielded.release()


class SimChannel:
    """Single-consumer FIFO on the virtual clock."""

    def __init__(self, kernel: "SimKernel"):
        self._k = kernel
        self._items: deque = deque()
        self._closed = False
        self._waiter: _Strand | None = None

    def put(self, item):
        self._items.append(item)
        self._wake()

    def close(self):
        self._closed = True
        self._wake()

    def _wake(self):
        if self._waiter is None:
            return
        strand, self._waiter = self._waiter, None
        self._k.schedule(0.0, lambda: self._k._resume(strand))

    def get(self, timeout: float | None = None):
        deadline = None if timeout is None else self._k.now + timeout * 1000.0
        while True:
            if self._items:
                return self._items.popleft()
            if self._closed:
                raise ChannelClosed()
            if deadline is not None and self._k.now >= deadline:
                raise Timeout()
            strand = self._k.current_strand()
            self._waiter = strand
            timer = None
            if deadline is not None:
                def fire(s=strand):
                    if self._waiter is s:
                        self._waiter = None
                        self._k._resume(s)
                timer = self._k.schedule_at(deadline, fire)
            self._k.park()
            if timer is not None:
                timer.cancel()


class _LinkDir:
    __slots__ = ("free_at", "last_arrival")

    def __init__(self):
        self.free_at = 0.0
        self.last_arrival = 0.0


class _Timer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn):
        self.fn = fn
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


_CLOSE = object()


class SimConnection:
    """One side of a bidirectional simulated link."""

    def __init__(self, kernel: "SimKernel", local: str, remote: str):
        self._k = kernel
        self.local = local
        self.remote = remote
        self.peer: "SimConnection | None" = None
        self._dir = _LinkDir()     # traffic this side sends
        self._inbox = SimChannel(kernel)
        self._handler = None
        self.closed = False

    def set_handler(self, fn):
        self._handler = fn
        while self._inbox._items:
            fn(self._inbox._items.popleft())

    def send(self, message: dict):
        if self.closed:
            raise ConnectionClosed("connection closed")
        wire.validate_message(message)
        self._transmit(message, _bulk_bytes(message))

    def _transmit(self, item, bulk: int):
        profile = self._k.profile
        start = max(self._k.now, self._dir.free_at)
        tx = bulk / profile.bandwidth * 1000.0 if bulk else 0.0
        self._dir.free_at = start + tx
        arrival = start + tx + profile.rtt / 2.0
        if profile.jitter:
            arrival += self._k.rng.uniform(0.0, profile.jitter)
        arrival = max(arrival, self._dir.last_arrival)
        self._dir.last_arrival = arrival
        peer = self.peer
        self._k.schedule_at(arrival, lambda: peer._arrive(item))

    def _arrive(self, item):
        if self.closed:
            return
        if item is _CLOSE:
            self._shut()
            return
        self._k._record(self.peer.local, self.local, item)
        if self._handler is not None:
            self._handler(item)
        else:
            self._inbox.put(item)

    def recv(self, timeout: float | None = None) -> dict:
        try:
            return self._inbox.get(timeout)
        except ChannelClosed:
            raise ConnectionClosed("peer closed") from None

    def close(self):
        # Graceful: rides the link so in-flight frames land first.
        if not self.closed:
            self.closed = True
            self._transmit(_CLOSE, 0)

    def force_close(self):
        # Abrupt teardown for destroyed instances; queued frames drop.
        for side in (self, self.peer):
            if side is not None and not side.closed:
                side._shut()

    def _shut(self):
        self.closed = True
        self._inbox.close()
        if self._handler is not None:
            self._handler(None)


def _bulk_bytes(message: dict) -> int:
    if message["type"] == "fs_request" and "data" in message:
        return len(message["data"])
    if message["type"] == "fs_response":
        data = message.get("result", {}).get("data")
        if isinstance(data, bytes):
            return len(data)
    return 0


def _frame_summary(message: dict):
    bulk = _bulk_bytes(message)
    if bulk:
        return (message["type"], message.get("seq"), bulk)
    return wire.canonicalize(message)


class SimKernel:
    def __init__(self, seed: int = 0, profile: NetworkProfile | None = None,
                 record_trace: bool = True):
        self.now = 0.0
        self.rng = random.Random(seed)
        self.profile = profile or NetworkProfile()
        self.trace: list[tuple] = []
        self._record_trace = record_trace
        self._heap: list[tuple] = []
        self._seq = itertools.count()
        self._listeners: dict = {}
        self._strands: list[_Strand] = []
        self._current: _Strand | None = None

    # -- scheduling ---------------------------------------------------------

    def schedule(self, delay_ms: float, fn) -> "_Timer":
        return self.schedule_at(self.now + delay_ms, fn)

    def schedule_at(self, t: float, fn) -> "_Timer":
        timer = _Timer(fn)
        heapq.heappush(self._heap, (t, next(self._seq), timer))
        return timer

    def run(self):
        """Drain the event heap; raises the first strand error, if any.

        Cancelled timers are skipped without advancing the clock, so a
        stale timeout never inflates measured completion times.
        """
        assert self._current is None, "run() called from inside a strand"
        while self._heap:
            t, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = max(self.now, t)
            timer.fn()
        for strand in self._strands:
            if strand.error is not None:
                raise strand.error

    # -- strands --------------------------------------------------------------

    def spawn_strand(self, fn, name: str = "strand") -> _Strand:
        strand = _Strand(fn, name)
        self._strands.append(strand)
        self.schedule(0.0, lambda: self._resume(strand))
        return strand

    def _resume(self, strand: _Strand):
        if strand.done:
            return
        prev, self._current = self._current, strand
        strand._go.release()
        strand._yielded.acquire()
        self._current = prev

    def park(self):
        strand = self._current
        assert strand is not None, "park() outside a strand"
        strand._yielded.release()
        strand._go.acquire()

    def current_strand(self) -> _Strand:
        assert self._current is not None, "blocking call outside a strand"
        return self._current

    def sleep(self, delay_ms: float):
        strand = self.current_strand()
        self.schedule(delay_ms, lambda: self._resume(strand))
        self.park()

    # -- network ---------------------------------------------------------------

    def listen(self, endpoint: str, on_connect):
        if endpoint in self._listeners:
            raise ValueError(f"endpoint {endpoint!r} already listening")
        self._listeners[endpoint] = on_connect

    def unlisten(self, endpoint: str):
        self._listeners.pop(endpoint, None)

    def connect(self, local: str, endpoint: str) -> SimConnection:
        on_connect = self._listeners.get(endpoint)
        if on_connect is None:
            raise ConnectionClosed(f"no listener at {endpoint!r}")
        client = SimConnection(self, local, endpoint)
        server = SimConnection(self, endpoint, local)
        client.peer, server.peer = server, client
        on_connect(server)
        return client

    def _record(self, src: str, dst: str, message: dict):
        if self._record_trace:
            self.trace.append((self.now, src, dst, _frame_summary(message)))


class SimBackend:
    """Orchestrator standing in for a container cluster, one strand per task."""

    def __init__(self, kernel: SimKernel, registry: dict,
                 nodes: tuple = ("node-0",), capacity: int = 64, broker=None):
        self.kernel = kernel
        self.registry = registry
        self.nodes = tuple(nodes)
        self.capacity = capacity
        self.broker = broker
        self._instances: dict[str, dict] = {}
        self._states: dict[str, TaskState] = {}
        self._counter = itertools.count(1)
        kernel.listen(CONTROL_ENDPOINT, self._on_control)

    # -- control endpoint: spawn_request frames from task runtimes -----------

    def _on_control(self, conn: SimConnection):
        def on_msg(msg):
            if msg is None or msg["type"] != "spawn_request":
                return
            spec_doc = msg["spec"]
            try:
                self.create_instance(TaskSpec.from_doc(spec_doc),
                                     msg.get("parent_endpoint"), env={})
            except (UnknownNode, CapacityExceeded, SpawnRejected) as exc:
                conn.send(wire.task_fail(spec_doc["id"], "spawn-rejected", str(exc)))
            else:
                conn.send(wire.spawn_ack(spec_doc["id"]))
        conn.set_handler(on_msg)

    # -- backend surface -------------------------------------------------------

    def create_instance(self, spec: TaskSpec, parent_endpoint: str | None,
                        env: dict) -> str:
        violations = validate_spec(spec)
        if violations:
            raise SpawnRejected(f"invalid spec: {violations[0]['code']}")
        node = spec.placement or self.nodes[0]
        if node not in self.nodes:
            raise UnknownNode(node)
        live = sum(1 for r in self._instances.values()
                   if r["node"] == node and r["state"] not in TERMINAL_STATES)
        if live >= self.capacity:
            raise CapacityExceeded(f"{node} is at capacity {self.capacity}")
        env = dict(env)
        if spec.workspace is not None:
            if self.broker is None:
                raise SpawnRejected("workspace requested but no volume broker")
            mount = self.broker.publish_volume(spec.workspace, spec.id)
            env["TASKMESH_MOUNT"] = wire.canonical_doc(mount).decode("utf-8")
        instance_id = f"i-{next(self._counter):04d}"
        record = {"instance": instance_id, "task": spec.id, "node": node,
                  "state": TaskState.SCHEDULED, "host": None, "upstream": None}
        self._instances[instance_id] = record
        self._states[spec.id] = TaskState.SCHEDULED
        self.kernel.spawn_strand(
            lambda: self._instance_main(record, spec, parent_endpoint, env),
            name=f"task:{spec.id[:8]}")
        return instance_id

    def _instance_main(self, record: dict, spec: TaskSpec,
                       parent_endpoint: str | None, env: dict):
        from ..runtime import serve_task
        host = SimHost(self.kernel, self, f"task:{spec.id}", env)
        record["host"] = host
        try:
            conn = self.kernel.connect(host.label, parent_endpoint)
        except ConnectionClosed:
            self._set_state(record, TaskState.FAILED)
            return
        record["upstream"] = conn

        def on_state(state: TaskState):
            self._set_state(record, state)

        serve_task(self.registry, spec, conn, host=host,
                   token=env.get("TASKMESH_TOKEN"), on_state=on_state)
        host.shutdown()

    def _set_state(self, record: dict, state: TaskState):
        if record["state"] not in TERMINAL_STATES:
            record["state"] = state
            self._states[record["task"]] = state

    def destroy_instance(self, instance_id: str):
        record = self._instances.get(instance_id)
        if record is None:
            raise UnknownInstance(instance_id)
        self._set_state(record, TaskState.CANCELED)
        if record["upstream"] is not None:
            record["upstream"].force_close()
        if record["host"] is not None:
            record["host"].shutdown(force=True)
        del self._instances[instance_id]

    def list_instances(self) -> list[dict]:
        return [{"instance": r["instance"], "task": r["task"],
                 "node": r["node"], "state": r["state"]}
                for r in self._instances.values()]

    def instance_state(self, task_id: str) -> TaskState | None:
        return self._states.get(task_id)


class SimHost:
    """Runtime adapter: listener for children, control link to the backend."""

    def __init__(self, kernel: SimKernel, backend: SimBackend, label: str, env: dict):
        self.kernel = kernel
        self.backend = backend
        self.label = label
        self.env = env
        self.self_endpoint = label
        self.rng = kernel.rng
        self.trace_sink = None
        self._children: dict[str, SimChannel] = {}
        self._tokens: dict[str, str | None] = {}
        self._conns: list[SimConnection] = []
        self._control: SimConnection | None = None
        kernel.listen(label, self._on_child_connect)

    def clock_ms(self) -> float:
        return self.kernel.now

    def sleep(self, ms: float):
        self.kernel.sleep(ms)

    def register_child(self, task_id: str, token: str | None) -> SimChannel:
        channel = SimChannel(self.kernel)
        self._children[task_id] = channel
        self._tokens[task_id] = token
        return channel

    def unregister_child(self, task_id: str):
        self._children.pop(task_id, None)
        self._tokens.pop(task_id, None)

    def _on_child_connect(self, conn: SimConnection):
        self._conns.append(conn)
        bound: list[str] = []

        def on_msg(msg):
            if msg is None:
                if bound and bound[0] in self._children:
                    self._children[bound[0]].close()
                return
            if not bound:
                if (msg["type"] != "hello" or msg["task_id"] not in self._children
                        or self._tokens.get(msg["task_id"]) != msg.get("token")):
                    conn.close()
                    return
                bound.append(msg["task_id"])
                self._sink("recv", f"task:{msg['task_id']}", msg)
                return
            self._sink("recv", f"task:{bound[0]}", msg)
            self._children[bound[0]].put(msg)
        conn.set_handler(on_msg)

    def _sink(self, direction: str, peer: str, msg: dict):
        if self.trace_sink is not None:
            self.trace_sink.append({"dir": direction, "peer": peer, "msg": msg})

    def spawn(self, spec_doc: dict, ack_timeout: float = 10.0):
        if self._control is None or self._control.closed:
            self._control = self.kernel.connect(self.label, CONTROL_ENDPOINT)
            self._conns.append(self._control)
        request = wire.spawn_request(spec_doc, parent_endpoint=self.self_endpoint)
        self._sink("send", CONTROL_ENDPOINT, request)
        self._control.send(request)
        reply = self._control.recv(timeout=ack_timeout)
        self._sink("recv", CONTROL_ENDPOINT, reply)
        if reply["type"] != "spawn_ack":
            raise SpawnRejected(reply.get("error", {}).get("message", "refused"))

    def connect(self, endpoint: str) -> SimConnection:
        conn = self.kernel.connect(self.label, endpoint)
        self._conns.append(conn)
        return conn

    def instance_state(self, task_id: str) -> TaskState | None:
        return self.backend.instance_state(task_id)

    def shutdown(self, force: bool = False):
        self.kernel.unlisten(self.label)
        for conn in self._conns:
            if force:
                conn.force_close()
            else:
                conn.close()
        for channel in self._children.values():
            channel.close()


def run_driver(kernel: SimKernel, backend: SimBackend, body, registry: dict | None = None):
    """Run `body(ctx)` as the workflow driver; returns its value after the sim drains."""
    from ..model import new_task_id
    from ..runtime import RuntimeContext

    driver_id = new_task_id(kernel.rng)
    host = SimHost(kernel, backend, f"task:{driver_id}", env={})
    ctx = RuntimeContext(driver_id, host, registry or backend.registry)
    box: dict = {}

    def main():
        box["value"] = body(ctx)

    kernel.spawn_strand(main, name="driver")
    kernel.run()
    if "value" not in box:
        raise RuntimeError("driver strand stalled before finishing")
    return box["value"], ctx


def run_root(kernel: SimKernel, backend: SimBackend, entrypoint: str,
             inputs: dict | None = None, timeout: float | None = None):
    """Spawn one root task and await it; returns (TaskResult, driver ctx)."""
    def body(ctx):
        handle = ctx.spawn(entrypoint, inputs or {})
        return ctx.await_result(handle, timeout=timeout)

    return run_driver(kernel, backend, body)


def sim_prober(kernel: SimKernel, label: str = "volume-probe"):
    """Volume-broker probe over the simulated network (call from a strand)."""
    from ..volumes import AuthRejected, EndpointUnreachable

    def probe(endpoint: str, token: str | None):
        try:
            conn = kernel.connect(label, endpoint)
        except ConnectionClosed as exc:
            raise EndpointUnreachable(endpoint) from exc
        try:
            conn.send(wire.hello("volume-probe", token=token))
            conn.send(wire.fs_request("volume-probe", 1, "getattr", path="/"))
            reply = conn.recv(timeout=5.0)
            if reply.get("type") != "fs_response":
                raise AuthRejected(endpoint)
        except (ConnectionClosed, Timeout) as exc:
            raise AuthRejected(endpoint) from exc
        finally:
            conn.close()

    return probe


def host_export(kernel: SimKernel, endpoint: str, store, read_only: bool = False,
                token: str | None = None, broker=None):
    """Serve an export inside the sim as a callback endpoint."""
    from ..netfs.service import ExportCore

    core = ExportCore(store, read_only=read_only, clock=lambda: kernel.now)

    def on_connect(conn: SimConnection):
        state: dict = {}

        def on_msg(msg):
            if msg is None:
                return
            if not state:
                if msg["type"] != "hello" or (token is not None and msg.get("token") != token):
                    conn.close()
                    return
                state["session"] = core.new_session(msg["task_id"])
                return
            if msg["type"] == "fs_request":
                conn.send(core.handle(state["session"], msg))
            elif msg["type"] == "volume_rpc" and "method" in msg and broker is not None:
                conn.send(broker.dispatch(msg))
        conn.set_handler(on_msg)

    kernel.listen(endpoint, on_connect)
    return core
