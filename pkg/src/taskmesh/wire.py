"""Framing and message vocabulary for all socket traffic.

A frame is a 4-byte big-endian length prefix followed by a UTF-8 payload
encoding exactly one message. The payload is produced by `canonicalize`,
which is deterministic: map keys sorted ascending bytewise, no
insignificant whitespace, numbers in shortest round-trip decimal form.
The same rules are implemented by non-Python SDKs, so canonical bytes can
be compared across languages.

Number form, precisely: integers print as plain decimal. Floats use the
shortest digit string that round-trips, laid out ECMAScript-style (plain
decimal while the decimal exponent is in (-6, 17), exponent notation
outside), except that integral floats always keep a ".0" or exponent
marker so int/float distinctness survives a round trip.

Binary data appears only in the fs read/write slots and rides as base64
text on the wire; in-memory messages hold real bytes there.
"""

import base64
import binascii
import json
import re
import struct

FRAME_LIMIT = 16 * 1024 * 1024
CHUNK_LIMIT = 64 * 1024

TASK_STATES = {"created", "scheduled", "running", "completed", "failed", "canceled"}
LOG_STREAMS = {"out", "err"}
OPEN_MODES = {"read", "write", "rw", "create-truncate"}
FS_ERROR_CODES = {
    "not-found", "exists", "not-dir", "is-dir",
    "not-empty", "bad-handle", "read-only", "io",
}

_TASK_ID_RE = re.compile(r"^[0-9a-f]{32}$")


class WireError(Exception):
    pass


class NonEncodable(WireError):
    """Message violates the vocabulary or holds values outside the document model."""


class FrameTooLarge(WireError):
    pass


class MalformedPayload(WireError):
    pass


class NeedMoreBytes(WireError):
    """Input ends mid-frame; `needed` bytes are still required."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


# ---------------------------------------------------------------------------
# canonical text encoding

_ESCAPE_RE = re.compile(r'["\\\x00-\x1f]')
_SHORT_ESCAPES = {
    '"': '\\"', "\\": "\\\\",
    "\b": "\\b", "\f": "\\f", "\n": "\\n", "\r": "\\r", "\t": "\\t",
}


def _escape_char(match: re.Match) -> str:
    ch = match.group(0)
    return _SHORT_ESCAPES.get(ch) or f"\\u{ord(ch):04x}"


def _escape_string(s: str) -> str:
    return '"' + _ESCAPE_RE.sub(_escape_char, s) + '"'


def _decompose_float(x: float) -> tuple[str, int]:
    # Shortest digits D plus point position n, such that x = 0.D * 10**n.
    s = repr(abs(x))
    mant, _, exp = s.partition("e")
    e = int(exp) if exp else 0
    intpart, _, frac = mant.partition(".")
    digits = intpart + frac
    point = len(intpart) + e
    stripped = digits.lstrip("0")
    point -= len(digits) - len(stripped)
    return stripped.rstrip("0"), point


def format_float(x: float) -> str:
    """Canonical decimal form of a finite float (see module docstring)."""
    if x != x or x in (float("inf"), float("-inf")):
        raise NonEncodable(f"{x!r} is outside the document model")
    if x == 0.0:
        return "-0.0" if repr(x).startswith("-") else "0.0"
    sign = "-" if x < 0 else ""
    digits, n = _decompose_float(x)
    k = len(digits)
    if n >= 17 or n <= -6:
        head = digits[0] if k == 1 else digits[0] + "." + digits[1:]
        e = n - 1
        return f"{sign}{head}e{'+' if e >= 0 else '-'}{abs(e)}"
    if n >= k:
        return f"{sign}{digits}{'0' * (n - k)}.0"
    if n >= 1:
        return f"{sign}{digits[:n]}.{digits[n:]}"
    return f"{sign}0.{'0' * -n}{digits}"


def _serialize(value, out: list):
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        out.append(format_float(value))
    elif isinstance(value, str):
        out.append(_escape_string(value))
    elif isinstance(value, list):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _serialize(item, out)
        out.append("]")
    elif isinstance(value, dict):
        out.append("{")
        first = True
        for key in sorted(value):
            if not isinstance(key, str):
                raise NonEncodable(f"map key {key!r} is not a string")
            if not first:
                out.append(",")
            first = False
            out.append(_escape_string(key))
            out.append(":")
            _serialize(value[key], out)
        out.append("}")
    else:
        raise NonEncodable(f"value of type {type(value).__name__} is outside the document model")


def canonical_doc(value) -> bytes:
    """Canonical UTF-8 encoding of a bare document value (no framing)."""
    out: list[str] = []
    _serialize(value, out)
    return "".join(out).encode("utf-8")


def is_document(value) -> bool:
    if value is None or isinstance(value, (bool, int, str)):
        return True
    if isinstance(value, float):
        return value == value and value not in (float("inf"), float("-inf"))
    if isinstance(value, list):
        return all(is_document(v) for v in value)
    if isinstance(value, dict):
        return all(isinstance(k, str) and is_document(v) for k, v in value.items())
    return False


# ---------------------------------------------------------------------------
# message vocabulary

def _is_int(v) -> bool:
    return type(v) is int


def _is_uint(v) -> bool:
    return type(v) is int and v >= 0


def _check(cond: bool, why: str):
    if not cond:
        raise NonEncodable(why)


def _check_fields(msg: dict, required: dict, optional: dict = {}):
    for name, pred in required.items():
        _check(name in msg, f"missing field {name!r}")
        _check(pred(msg[name]), f"bad value for field {name!r}")
    for name, pred in optional.items():
        if name in msg:
            _check(pred(msg[name]), f"bad value for field {name!r}")
    allowed = {"type", *required, *optional}
    extras = set(msg) - allowed
    _check(not extras, f"unexpected fields {sorted(extras)}")


def _is_str(v) -> bool:
    return isinstance(v, str)


def _is_task_id(v) -> bool:
    return isinstance(v, str) and bool(_TASK_ID_RE.match(v))


def _is_error_obj(v) -> bool:
    return (
        isinstance(v, dict)
        and set(v) <= {"code", "message"}
        and isinstance(v.get("code"), str)
        and v["code"] != ""
        and isinstance(v.get("message", ""), str)
    )


def _is_chunk(v) -> bool:
    return isinstance(v, bytes) and len(v) <= CHUNK_LIMIT


def _validate_spec_doc(doc) -> bool:
    if not isinstance(doc, dict):
        return False
    if set(doc) - {"id", "name", "entrypoint", "inputs", "parent", "placement", "workspace"}:
        return False
    for key in ("id", "name", "entrypoint"):
        if not isinstance(doc.get(key), str):
            return False
    if not isinstance(doc.get("inputs", {}), dict) or not is_document(doc.get("inputs", {})):
        return False
    for key in ("parent", "placement", "workspace"):
        if key in doc and not isinstance(doc[key], str):
            return False
    return True


# fs op -> (required field -> predicate)
FS_OPS = {
    "lookup": {"path": _is_str},
    "getattr": {"path": _is_str},
    "readdir": {"path": _is_str},
    "open": {"path": _is_str, "mode": lambda v: v in OPEN_MODES},
    "read": {"fh": _is_uint, "offset": _is_uint,
             "len": lambda v: _is_uint(v) and v <= CHUNK_LIMIT},
    "write": {"fh": _is_uint, "offset": _is_uint, "data": _is_chunk},
    "create": {"path": _is_str, "mode": _is_uint},
    "mkdir": {"path": _is_str},
    "unlink": {"path": _is_str},
    "rmdir": {"path": _is_str},
    "rename": {"from": _is_str, "to": _is_str},
    "truncate": {"path": _is_str, "size": _is_uint},
    "flush": {"fh": _is_uint},
    "release": {"fh": _is_uint},
}


def _validate_fs_request(msg: dict):
    _check(isinstance(msg.get("session"), str) and msg["session"] != "", "bad session")
    _check(_is_uint(msg.get("seq")), "bad seq")
    op = msg.get("op")
    _check(op in FS_OPS, f"unknown fs op {op!r}")
    fields = FS_OPS[op]
    for name, pred in fields.items():
        _check(name in msg, f"fs {op} missing {name!r}")
        _check(pred(msg[name]), f"fs {op}: bad value for {name!r}")
    extras = set(msg) - {"type", "session", "seq", "op", *fields}
    _check(not extras, f"fs {op}: unexpected fields {sorted(extras)}")


def _is_attr(v) -> bool:
    return (
        isinstance(v, dict)
        and set(v) == {"kind", "size", "mtime", "mode"}
        and v["kind"] in ("file", "directory")
        and _is_uint(v["size"])
        and _is_uint(v["mtime"])
        and _is_uint(v["mode"])
        and v["mode"] < 1 << 16
    )


def _validate_fs_result(result: dict):
    _check(isinstance(result, dict), "result must be a map")
    for key, value in result.items():
        _check(isinstance(key, str), "result keys must be strings")
        if key == "data":
            _check(_is_chunk(value), "result data must be bytes within the chunk limit")
        elif key == "attr":
            _check(_is_attr(value), "bad attr in result")
        elif key == "entries":
            _check(isinstance(value, list) and all(isinstance(e, str) for e in value),
                   "entries must be a list of names")
        else:
            _check(is_document(value), f"result field {key!r} outside document model")


def _validate_fs_response(msg: dict):
    _check(isinstance(msg.get("session"), str) and msg["session"] != "", "bad session")
    _check(_is_uint(msg.get("seq")), "bad seq")
    has_result = "result" in msg
    has_error = "error" in msg
    _check(has_result != has_error, "fs_response needs exactly one of result/error")
    extras = set(msg) - {"type", "session", "seq", "result", "error"}
    _check(not extras, f"fs_response: unexpected fields {sorted(extras)}")
    if has_error:
        _check(msg["error"] in FS_ERROR_CODES, f"unknown fs error code {msg['error']!r}")
    else:
        _validate_fs_result(msg["result"])


def _validate_volume_rpc(msg: dict):
    _check(_is_uint(msg.get("seq")), "bad seq")
    variants = [k for k in ("method", "result", "error") if k in msg]
    _check(len(variants) == 1, "volume_rpc needs exactly one of method/result/error")
    kind = variants[0]
    if kind == "method":
        _check(isinstance(msg["method"], str) and msg["method"] != "", "bad method")
        _check(isinstance(msg.get("params"), dict) and is_document(msg["params"]), "bad params")
        allowed = {"type", "seq", "method", "params"}
    elif kind == "result":
        _check(isinstance(msg["result"], dict) and is_document(msg["result"]), "bad result")
        allowed = {"type", "seq", "result"}
    else:
        _check(_is_error_obj(msg["error"]), "bad error")
        allowed = {"type", "seq", "error"}
    extras = set(msg) - allowed
    _check(not extras, f"volume_rpc: unexpected fields {sorted(extras)}")


_SIMPLE_VALIDATORS = {
    "hello": lambda m: _check_fields(m, {"task_id": _is_str}, {"token": _is_str}),
    "status": lambda m: _check_fields(
        m, {"task_id": _is_str, "state": lambda v: v in TASK_STATES}),
    "log": lambda m: _check_fields(
        m, {"task_id": _is_str, "stream": lambda v: v in LOG_STREAMS, "text": _is_str}),
    "return": lambda m: _check_fields(m, {"task_id": _is_str, "value": is_document}),
    "fail": lambda m: _check_fields(m, {"task_id": _is_str, "error": _is_error_obj}),
    # parent_endpoint rides along so a task's own runtime can request the
    # spawn over the wire and still have the child connect back to it.
    "spawn_request": lambda m: _check_fields(
        m, {"spec": _validate_spec_doc}, {"parent_endpoint": _is_str}),
    "spawn_ack": lambda m: _check_fields(m, {"task_id": _is_str}),
    "fs_request": _validate_fs_request,
    "fs_response": _validate_fs_response,
    "volume_rpc": _validate_volume_rpc,
}

MESSAGE_TYPES = frozenset(_SIMPLE_VALIDATORS)


def validate_message(msg) -> None:
    """Raise NonEncodable unless msg is a well-formed message of a known type."""
    if not isinstance(msg, dict):
        raise NonEncodable("message must be a map")
    mtype = msg.get("type")
    if mtype not in _SIMPLE_VALIDATORS:
        raise NonEncodable(f"unknown message type {mtype!r}")
    _SIMPLE_VALIDATORS[mtype](msg)


def _to_wire(msg: dict) -> dict:
    # Replace declared binary slots with base64 text.
    if msg["type"] == "fs_request" and "data" in msg:
        msg = dict(msg, data=base64.b64encode(msg["data"]).decode("ascii"))
    elif msg["type"] == "fs_response" and "data" in msg.get("result", {}):
        result = dict(msg["result"])
        result["data"] = base64.b64encode(result["data"]).decode("ascii")
        msg = dict(msg, result=result)
    return msg


def _from_wire(msg: dict) -> dict:
    try:
        if msg.get("type") == "fs_request" and isinstance(msg.get("data"), str):
            msg["data"] = base64.b64decode(msg["data"], validate=True)
        elif msg.get("type") == "fs_response" and isinstance(msg.get("result"), dict) \
                and isinstance(msg["result"].get("data"), str):
            msg["result"]["data"] = base64.b64decode(msg["result"]["data"], validate=True)
    except binascii.Error as exc:
        raise MalformedPayload(f"bad base64 data: {exc}") from None
    return msg


def canonicalize(message: dict) -> bytes:
    """Deterministic payload bytes for a well-formed message."""
    validate_message(message)
    return canonical_doc(_to_wire(message))


def frame_payload(payload: bytes) -> bytes:
    """Prefix an already-encoded payload with its 4-byte big-endian length."""
    if len(payload) > FRAME_LIMIT:
        raise FrameTooLarge(f"payload is {len(payload)} bytes, cap is {FRAME_LIMIT}")
    return struct.pack(">I", len(payload)) + payload


def encode_frame(message: dict) -> bytes:
    return frame_payload(canonicalize(message))


def _reject_constant(name: str):
    raise MalformedPayload(f"non-finite number token {name!r}")


def _strict_pairs(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise MalformedPayload(f"duplicate key {key!r}")
        obj[key] = value
    return obj


def _decode_payload(payload: bytes) -> dict:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"payload is not UTF-8: {exc}") from None
    try:
        obj = json.loads(text, parse_constant=_reject_constant,
                         object_pairs_hook=_strict_pairs)
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"payload is not a document: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("type"), str):
        raise MalformedPayload("payload must be a map with a string 'type'")
    obj = _from_wire(obj)
    try:
        validate_message(obj)
    except NonEncodable as exc:
        raise MalformedPayload(str(exc)) from None
    return obj


def decode_frame(data: bytes) -> tuple[dict, bytes]:
    """Decode one frame from the head of `data`; return (message, leftover).

    Raises NeedMoreBytes when the input ends mid-frame, with the exact
    byte count still required.
    """
    if len(data) < 4:
        raise NeedMoreBytes(4 - len(data))
    length = int.from_bytes(data[:4], "big")
    if length > FRAME_LIMIT:
        raise MalformedPayload(f"declared frame length {length} exceeds cap")
    if len(data) < 4 + length:
        raise NeedMoreBytes(4 + length - len(data))
    message = _decode_payload(bytes(data[4:4 + length]))
    return message, bytes(data[4 + length:])


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte slices, get whole messages.

    Splitting a stream at any boundary and feeding the pieces yields the
    same message sequence as feeding it whole.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf.extend(data)
        messages = []
        offset = 0
        while True:
            if len(self._buf) - offset < 4:
                break
            length = int.from_bytes(self._buf[offset:offset + 4], "big")
            if length > FRAME_LIMIT:
                raise MalformedPayload(f"declared frame length {length} exceeds cap")
            if len(self._buf) - offset < 4 + length:
                break
            messages.append(_decode_payload(bytes(self._buf[offset + 4:offset + 4 + length])))
            offset += 4 + length
        if offset:
            del self._buf[:offset]
        return messages

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# message builders

def hello(task_id: str, token: str | None = None) -> dict:
    msg = {"type": "hello", "task_id": task_id}
    if token is not None:
        msg["token"] = token
    return msg


def status(task_id: str, state: str) -> dict:
    return {"type": "status", "task_id": task_id, "state": state}


def log(task_id: str, stream: str, text: str) -> dict:
    return {"type": "log", "task_id": task_id, "stream": stream, "text": text}


def task_return(task_id: str, value) -> dict:
    return {"type": "return", "task_id": task_id, "value": value}


def task_fail(task_id: str, code: str, message: str = "") -> dict:
    return {"type": "fail", "task_id": task_id, "error": {"code": code, "message": message}}


def spawn_request(spec_doc: dict, parent_endpoint: str | None = None) -> dict:
    msg = {"type": "spawn_request", "spec": spec_doc}
    if parent_endpoint is not None:
        msg["parent_endpoint"] = parent_endpoint
    return msg


def spawn_ack(task_id: str) -> dict:
    return {"type": "spawn_ack", "task_id": task_id}


def fs_request(session: str, seq: int, op: str, **fields) -> dict:
    return {"type": "fs_request", "session": session, "seq": seq, "op": op, **fields}


def fs_ok(session: str, seq: int, result: dict) -> dict:
    return {"type": "fs_response", "session": session, "seq": seq, "result": result}


def fs_err(session: str, seq: int, code: str) -> dict:
    return {"type": "fs_response", "session": session, "seq": seq, "error": code}


def volume_call(seq: int, method: str, params: dict) -> dict:
    return {"type": "volume_rpc", "seq": seq, "method": method, "params": params}


def volume_ok(seq: int, result: dict) -> dict:
    return {"type": "volume_rpc", "seq": seq, "result": result}


def volume_err(seq: int, code: str, message: str = "") -> dict:
    return {"type": "volume_rpc", "seq": seq, "error": {"code": code, "message": message}}
