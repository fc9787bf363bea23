"""Volume lifecycle: create/publish/unpublish/delete over export endpoints.

A broker row binds an export daemon address (plus bearer token) to the
tasks it is published to. Create probes the endpoint before admitting
the record; publish hands out the mount document a spawning backend
injects into the task's environment. The full storage-driver surface is
collapsed to these four calls; mount_path is fixed so task code is
identical on every backend.
"""

import itertools
import threading
from dataclasses import dataclass, field

from . import transport, wire

MOUNT_PATH = "/workspace"


class VolumeError(Exception):
    code = "volume-error"


class EndpointUnreachable(VolumeError):
    code = "endpoint-unreachable"


class AuthRejected(VolumeError):
    code = "auth-rejected"


class UnknownVolume(VolumeError):
    code = "unknown-volume"


class VolumeDeleted(VolumeError):
    code = "volume-deleted"


class VolumeBusy(VolumeError):
    code = "volume-busy"


@dataclass
class VolumeRecord:
    id: str
    endpoint: str
    token: str | None
    published_to: set = field(default_factory=set)
    state: str = "created"  # created | published | deleted


def tcp_probe(endpoint: str, token: str | None):
    """Default reachability check: connect, hello, one stat of the root.

    The export daemon drops unauthenticated sessions silently, so a
    closed connection after hello means the token was refused.
    """
    try:
        conn = transport.connect(endpoint, timeout=5.0)
    except (transport.TransportError, OSError) as exc:
        raise EndpointUnreachable(endpoint) from exc
    try:
        conn.send(wire.hello("volume-probe", token=token))
        conn.send(wire.fs_request("volume-probe", 1, "getattr", path="/"))
        reply = conn.recv(timeout=5.0)
        if reply.get("type") != "fs_response":
            raise AuthRejected(endpoint)
    except transport.Timeout as exc:
        raise EndpointUnreachable(endpoint) from exc
    except (transport.TransportError, OSError) as exc:
        raise AuthRejected(endpoint) from exc
    finally:
        conn.close()


class VolumeBroker:
    """Thread-safe registry; every call is atomic. State is derived:
    published iff any task holds the volume, else created, until deleted."""

    def __init__(self, prober=tcp_probe):
        self._prober = prober
        self._records: dict[str, VolumeRecord] = {}
        self._counter = itertools.count(1)
        self._lock = threading.RLock()

    def create_volume(self, endpoint: str, token: str | None = None) -> str:
        self._prober(endpoint, token)
        with self._lock:
            volume_id = f"vol-{next(self._counter):04d}"
            self._records[volume_id] = VolumeRecord(volume_id, endpoint, token)
            return volume_id

    def publish_volume(self, volume: str, task: str) -> dict:
        with self._lock:
            record = self._get(volume)
            if record.state == "deleted":
                raise VolumeDeleted(volume)
            record.published_to.add(task)
            record.state = "published"
            mount = {"endpoint": record.endpoint, "mount_path": MOUNT_PATH}
            if record.token is not None:
                mount["token"] = record.token
            return mount

    def unpublish_volume(self, volume: str, task: str):
        with self._lock:
            record = self._get(volume)
            record.published_to.discard(task)  # unknown task: idempotent no-op
            if record.state == "published" and not record.published_to:
                record.state = "created"

    def delete_volume(self, volume: str):
        with self._lock:
            record = self._get(volume)
            if record.published_to:
                raise VolumeBusy(volume)
            record.state = "deleted"

    def volume_record(self, volume: str) -> VolumeRecord:
        with self._lock:
            return self._get(volume)

    def list_volumes(self) -> list[VolumeRecord]:
        with self._lock:
            return list(self._records.values())

    def _get(self, volume: str) -> VolumeRecord:
        record = self._records.get(volume)
        if record is None:
            raise UnknownVolume(volume)
        return record

    # -- wire surface: volume_rpc {method, params} -------------------------------

    def dispatch(self, msg: dict) -> dict:
        seq = msg["seq"]
        method = msg.get("method")
        params = msg.get("params", {})
        try:
            if method == "create":
                volume = self.create_volume(params["endpoint"], params.get("token"))
                return wire.volume_ok(seq, {"volume": volume})
            if method == "publish":
                mount = self.publish_volume(params["volume"], params["task"])
                return wire.volume_ok(seq, {"mount": mount})
            if method == "unpublish":
                self.unpublish_volume(params["volume"], params["task"])
                return wire.volume_ok(seq, {"ok": True})
            if method == "delete":
                self.delete_volume(params["volume"])
                return wire.volume_ok(seq, {"ok": True})
            if method == "info":
                record = self.volume_record(params["volume"])
                return wire.volume_ok(seq, {
                    "volume": record.id, "endpoint": record.endpoint,
                    "state": record.state,
                    "published_to": sorted(record.published_to)})
            return wire.volume_err(seq, "unknown-method", str(method))
        except KeyError as exc:
            return wire.volume_err(seq, "bad-params", str(exc))
        except VolumeError as exc:
            return wire.volume_err(seq, exc.code, str(exc))


class BrokerClient:
    """Volume calls over an existing framed connection (CLI side)."""

    def __init__(self, conn):
        self.conn = conn
        self._seq = itertools.count(1)

    def call(self, method: str, **params) -> dict:
        seq = next(self._seq)
        self.conn.send(wire.volume_call(seq, method, params))
        while True:
            reply = self.conn.recv(timeout=10.0)
            if reply.get("type") == "volume_rpc" and reply.get("seq") == seq:
                break
        if "error" in reply:
            raise BrokerCallFailed(reply["error"])
        return reply["result"]


class BrokerCallFailed(Exception):
    def __init__(self, error: dict):
        super().__init__(f"{error.get('code')}: {error.get('message', '')}")
        self.error = error
