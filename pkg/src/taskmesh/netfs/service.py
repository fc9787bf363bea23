"""Export daemon: sessions, op dispatch, and the TCP server.

A session owns its file handles. Writes buffer in the handle and land in
the store at flush (release implies flush), so another session sees the
final bytes no later than the writer's release; reads through the writing
handle patch the buffered ranges over the store content, keeping
read-after-write exact within one handle.

Every mutation is stamped from the export's logical clock, which only
moves forward, so attribute timestamps are monotone regardless of the
backing store.
"""

import threading
import time
from dataclasses import dataclass

from .. import wire
from ..transport import ConnectionClosed, TcpListener, Timeout
from .stores import DirStore, FsError, normalize

READABLE_MODES = {"read", "rw"}
WRITABLE_MODES = {"write", "rw", "create-truncate"}
DEFAULT_FILE_MODE = 0o644


class BindFailure(Exception):
    pass


@dataclass
class ExportConfig:
    root: str
    read_only: bool = False
    token: str | None = None
    attr_ttl: int = 500
    chunk: int = wire.CHUNK_LIMIT

    def __post_init__(self):
        if self.chunk != wire.CHUNK_LIMIT:
            raise ValueError(f"chunk size is fixed at {wire.CHUNK_LIMIT}")
        if self.attr_ttl < 0:
            raise ValueError("attr_ttl must be >= 0")


class _Handle:
    __slots__ = ("parts", "mode", "pending")

    def __init__(self, parts: list[str], mode: str):
        self.parts = parts
        self.mode = mode
        self.pending: list[tuple[int, bytes]] = []


class SessionFs:
    """One session's view of a store: handle table plus write buffers."""

    def __init__(self, store, session_id: str, read_only: bool, clock):
        self.store = store
        self.session_id = session_id
        self.read_only = read_only
        self.clock = clock
        self.last_seq = -1
        self._handles: dict[int, _Handle] = {}
        self._next_fh = 1

    # -- op implementations; each returns a result map or raises FsError ----

    def _resolve(self, path: str) -> list[str]:
        parts = normalize(path)
        if parts is None:
            raise FsError("not-found")
        return parts

    def _guard_write(self):
        if self.read_only:
            raise FsError("read-only")

    def _handle(self, fh: int) -> _Handle:
        handle = self._handles.get(fh)
        if handle is None:
            raise FsError("bad-handle")
        return handle

    def op_lookup(self, path: str) -> dict:
        return {"attr": self.store.getattr(self._resolve(path))}

    op_getattr = op_lookup

    def op_readdir(self, path: str) -> dict:
        return {"entries": self.store.readdir(self._resolve(path))}

    def op_open(self, path: str, mode: str) -> dict:
        if mode != "read":
            self._guard_write()
        parts = self._resolve(path)
        try:
            attr = self.store.getattr(parts)
        except FsError as exc:
            if exc.code != "not-found" or mode != "create-truncate":
                raise
            self.store.create(parts, DEFAULT_FILE_MODE, self.clock())
            attr = self.store.getattr(parts)
        else:
            if attr["kind"] == "directory":
                raise FsError("is-dir")
            if mode == "create-truncate" and attr["size"] > 0:
                self.store.truncate(parts, 0, self.clock())
                attr = self.store.getattr(parts)
        fh = self._next_fh
        self._next_fh += 1
        self._handles[fh] = _Handle(parts, mode)
        return {"fh": fh, "attr": attr}

    def op_read(self, fh: int, offset: int, length: int) -> dict:
        handle = self._handle(fh)
        if handle.mode not in READABLE_MODES:
            raise FsError("bad-handle")
        attr = self.store.getattr(handle.parts)
        if attr["kind"] == "directory":
            raise FsError("is-dir")
        size = attr["size"]
        for off, data in handle.pending:
            size = max(size, off + len(data))
        if offset >= size:
            return {"data": b""}
        want = min(length, size - offset)
        buf = bytearray(want)
        base = self.store.read_range(handle.parts, offset, want)
        buf[:len(base)] = base
        for off, data in handle.pending:
            lo = max(off, offset)
            hi = min(off + len(data), offset + want)
            if lo < hi:
                buf[lo - offset:hi - offset] = data[lo - off:hi - off]
        return {"data": bytes(buf)}

    def op_write(self, fh: int, offset: int, data: bytes) -> dict:
        handle = self._handle(fh)
        if handle.mode not in WRITABLE_MODES:
            raise FsError("bad-handle")
        handle.pending.append((offset, data))
        return {"written": len(data)}

    def op_create(self, path: str, mode: int) -> dict:
        self._guard_write()
        parts = self._resolve(path)
        self.store.create(parts, mode, self.clock())
        return {"attr": self.store.getattr(parts)}

    def op_mkdir(self, path: str) -> dict:
        self._guard_write()
        parts = self._resolve(path)
        self.store.mkdir(parts, self.clock())
        return {"attr": self.store.getattr(parts)}

    def op_unlink(self, path: str) -> dict:
        self._guard_write()
        self.store.unlink(self._resolve(path), self.clock())
        return {}

    def op_rmdir(self, path: str) -> dict:
        self._guard_write()
        self.store.rmdir(self._resolve(path), self.clock())
        return {}

    def op_rename(self, src: str, dst: str) -> dict:
        self._guard_write()
        self.store.rename(self._resolve(src), self._resolve(dst), self.clock())
        return {}

    def op_truncate(self, path: str, size: int) -> dict:
        self._guard_write()
        parts = self._resolve(path)
        self.store.truncate(parts, size, self.clock())
        return {"attr": self.store.getattr(parts)}

    def op_flush(self, fh: int) -> dict:
        self._apply_pending(self._handle(fh))
        return {}

    def op_release(self, fh: int) -> dict:
        handle = self._handle(fh)
        del self._handles[fh]
        self._apply_pending(handle)
        return {}

    def _apply_pending(self, handle: _Handle):
        # The buffer is dropped whether or not it lands; a failed flush
        # reports the first error and discards the rest.
        pending, handle.pending = handle.pending, []
        for offset, data in pending:
            self.store.write_range(handle.parts, offset, data, self.clock())


_OP_ARGS = {
    "lookup": ("path",), "getattr": ("path",), "readdir": ("path",),
    "open": ("path", "mode"), "read": ("fh", "offset", "len"),
    "write": ("fh", "offset", "data"), "create": ("path", "mode"),
    "mkdir": ("path",), "unlink": ("path",), "rmdir": ("path",),
    "rename": ("from", "to"), "truncate": ("path", "size"),
    "flush": ("fh",), "release": ("fh",),
}


def handle_fs_request(session: SessionFs, request: dict) -> dict:
    """Apply one well-formed fs_request; always returns the mirrored response."""
    op = request["op"]
    args = [request[name] for name in _OP_ARGS[op]]
    try:
        result = getattr(session, f"op_{op}")(*args)
    except FsError as exc:
        return wire.fs_err(request["session"], request["seq"], exc.code)
    return wire.fs_ok(request["session"], request["seq"], result)


def _wall_ms() -> int:
    return int(time.time() * 1000)


class ExportCore:
    """Shared-store session registry with a monotone logical clock."""

    def __init__(self, store, read_only: bool = False, clock=_wall_ms):
        self.store = store
        self.read_only = read_only
        self._lock = threading.RLock()
        self._source = clock
        self._last_ms = 0

    def now_ms(self) -> int:
        with self._lock:
            self._last_ms = max(self._last_ms, int(self._source()))
            return self._last_ms

    def new_session(self, session_id: str) -> SessionFs:
        return SessionFs(self.store, session_id, self.read_only, self.now_ms)

    def handle(self, session: SessionFs, request: dict) -> dict:
        with self._lock:
            if request["session"] != session.session_id or request["seq"] <= session.last_seq:
                return wire.fs_err(request["session"], request["seq"], "io")
            session.last_seq = request["seq"]
            return handle_fs_request(session, request)


class ExportServer:
    """TCP daemon for one export root; optionally hosts a volume broker."""

    def __init__(self, config: ExportConfig, host: str = "127.0.0.1", port: int = 0,
                 clock=_wall_ms, broker=None):
        self.config = config
        store = DirStore(config.root, now_ms=int(clock()))
        self.core = ExportCore(store, read_only=config.read_only, clock=clock)
        self.broker = broker
        try:
            self._listener = TcpListener(host, port)
        except OSError as exc:
            raise BindFailure(str(exc)) from None
        self.endpoint = self._listener.endpoint
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn = self._listener.accept(timeout=0.2)
            except Timeout:
                continue
            except ConnectionClosed:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        try:
            hello = conn.recv(timeout=10.0)
            if hello.get("type") != "hello":
                return
            if self.config.token is not None and hello.get("token") != self.config.token:
                return
            session = self.core.new_session(hello["task_id"])
            while True:
                msg = conn.recv()
                if msg["type"] == "fs_request":
                    conn.send(self.core.handle(session, msg))
                elif msg["type"] == "volume_rpc" and "method" in msg:
                    conn.send(self._volume_call(msg))
        except (ConnectionClosed, Timeout, wire.WireError):
            pass
        finally:
            conn.close()

    def _volume_call(self, msg: dict) -> dict:
        if self.broker is None:
            return wire.volume_err(msg["seq"], "no-broker", "no volume broker attached")
        return self.broker.dispatch(msg)

    def close(self):
        self._stop.set()
        self._listener.close()
        self._accept_thread.join(timeout=2.0)


def serve_export(config: ExportConfig, host: str = "127.0.0.1", port: int = 0,
                 clock=_wall_ms, broker=None) -> ExportServer:
    return ExportServer(config, host, port, clock=clock, broker=broker)
