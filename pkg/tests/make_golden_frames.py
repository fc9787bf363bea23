"""Regenerate tests/data/golden_frames.json from the reference codec.

Every entry pins the exact frame bytes for one message, plus canonical
bytes for a handful of bare documents. Other codec implementations must
reproduce these byte-for-byte. Values avoid integral floats on purpose:
ECMAScript cannot tell 2.0 from 2, so cross-language documents only use
ints and non-integral floats.
"""

import json
import os

from taskmesh import wire

DOCS = [
    None,
    True,
    False,
    0,
    -7,
    9007199254740991,
    0.5,
    -2.5,
    3.14,
    1.5e-7,
    1e+21,
    1e-7,
    "",
    "plain",
    "esc \" \\ \n \t  ok",
    "héllo wörld é",
    [1, "two", None, [True, 0.125]],
    {"Z": 1, "a": 2, "z": 3, "é": 4},
    {"nested": {"xs": [1, 2, 3], "f": -0.5}, "empty": {}, "list": []},
]

MESSAGES = [
    ("hello_plain", wire.hello("task-1")),
    ("hello_token", wire.hello("task-2", token="s3cret")),
    ("status_running", wire.status("task-1", "running")),
    ("status_completed", wire.status("task-1", "completed")),
    ("log_line", wire.log("task-1", "out", "hello from task\n")),
    ("return_scalar", wire.task_return("task-1", 42)),
    ("return_doc", wire.task_return("task-1", {
        "total": 30, "ratio": 0.75, "tags": ["a", "b"],
        "meta": {"ok": True, "note": "héllo"}})),
    ("fail_msg", wire.task_fail("task-1", "task-failed",
                                "RuntimeError: boom")),
    ("spawn_request", wire.spawn_request({
        "id": "abcdef0123456789", "entrypoint": "add",
        "inputs": {"a": 1, "b": 2}, "parent": "fedcba9876543210",
        "name": "adder"},
        parent_endpoint="127.0.0.1:9999")),
    ("spawn_ack", wire.spawn_ack("abcdef0123456789")),
    ("fs_open", wire.fs_request("sess-1", 1, "open",
                                path="/workspace/a.txt", mode="read")),
    ("fs_write_bytes", wire.fs_request("sess-1", 2, "write", fh=1, offset=0,
                                       data=b"\x00\x01\xfe\xffbinary")),
    ("fs_read_reply", wire.fs_ok("sess-1", 3, {"data": b"payload"})),
    ("fs_attr_reply", wire.fs_ok("sess-1", 4, {"attr": {
        "kind": "file", "size": 1024, "mtime": 1700000000000,
        "mode": 420}})),
    ("fs_error_reply", wire.fs_err("sess-1", 5, "not-found")),
    ("volume_create", wire.volume_call(1, "create", {
        "endpoint": "127.0.0.1:7000", "token": None})),
    ("volume_ok", wire.volume_ok(1, {"volume": "vol-0001"})),
    ("volume_err", wire.volume_err(2, "volume-busy", "vol-0001")),
]


def build() -> dict:
    return {
        "docs": [{"doc_json": json.dumps(doc, ensure_ascii=False),
                  "canonical_hex": wire.canonical_doc(doc).hex()}
                 for doc in DOCS],
        "frames": [{"name": name,
                    "frame_hex": wire.encode_frame(msg).hex()}
                   for name, msg in MESSAGES],
    }


def main():
    out = os.path.join(os.path.dirname(__file__), "data", "golden_frames.json")
    data = build()
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, ensure_ascii=False)
        fh.write("\n")
    print(f"wrote {out}: {len(data['docs'])} docs, {len(data['frames'])} frames")


if __name__ == "__main__":
    main()
