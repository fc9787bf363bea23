"""Blocking TCP transport carrying wire frames, plus thread-side channels.

One Connection pairs one reader with one writer. `send` serializes frame
writes internally, so several threads may share the writing side; `recv`
must stay single-threaded. The simulated backend implements the same
Connection surface over a virtual clock, so everything above this layer
is transport-agnostic.
"""

import queue
import socket
import threading
from collections import deque

from . import wire


class TransportError(Exception):
    pass


class ConnectionClosed(TransportError):
    pass


class Timeout(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


_SENTINEL = object()


class ThreadChannel:
    """Unbounded single-consumer FIFO. `get` after close drains, then raises."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self._drained = False

    def put(self, item):
        self._q.put(item)

    def close(self):
        self._q.put(_SENTINEL)

    def get(self, timeout: float | None = None):
        if self._drained:
            raise ChannelClosed()
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            raise Timeout() from None
        if item is _SENTINEL:
            self._drained = True
            raise ChannelClosed()
        return item


class TcpConnection:
    def __init__(self, sock: socket.socket, remote: str):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._decoder = wire.FrameDecoder()
        self._ready: deque = deque()
        self._closed = False
        self.remote = remote
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, message: dict):
        frame = wire.encode_frame(message)
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from None

    def recv(self, timeout: float | None = None) -> dict:
        if self._ready:
            return self._ready.popleft()
        while True:
            try:
                self._sock.settimeout(timeout)
                data = self._sock.recv(65536)
            except socket.timeout:
                raise Timeout() from None
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from None
            if not data:
                raise ConnectionClosed("peer closed")
            self._ready.extend(self._decoder.feed(data))
            if self._ready:
                return self._ready.popleft()

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        addr = self._sock.getsockname()
        self.endpoint = f"{addr[0]}:{addr[1]}"

    def accept(self, timeout: float | None = None) -> TcpConnection:
        try:
            self._sock.settimeout(timeout)
            sock, addr = self._sock.accept()
        except socket.timeout:
            raise Timeout() from None
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from None
        return TcpConnection(sock, remote=f"{addr[0]}:{addr[1]}")

    def close(self):
        self._sock.close()


def connect(endpoint: str, timeout: float = 10.0) -> TcpConnection:
    host, _, port = endpoint.rpartition(":")
    try:
        sock = socket.create_connection((host, int(port)), timeout=timeout)
    except socket.timeout:
        raise Timeout(f"connect to {endpoint}") from None
    except OSError as exc:
        raise ConnectionClosed(f"connect to {endpoint}: {exc}") from None
    sock.settimeout(None)
    return TcpConnection(sock, remote=endpoint)
