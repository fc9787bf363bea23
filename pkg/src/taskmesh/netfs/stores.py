"""Backing stores for the export daemon.

Two implementations with byte-identical observable behavior: DirStore
serves a real directory, MemStore is the in-memory reference model used
as an oracle in equivalence tests. Both take every timestamp from the
caller's logical clock (DirStore forces them onto disk with utime), so
responses and final trees can be compared exactly.

Semantics are path-based throughout: a store never holds OS handles
open, and check order is identical in both implementations. All paths
arrive as slash-separated strings and are normalized here; anything
that would climb above the root resolves to "not-found".
"""

import os
import stat

ROOT_MODE = 0o755
DIR_MODE = 0o755
FILE_MODE_MASK = 0o777


class FsError(Exception):
    """Carries one of the fixed wire error codes."""

    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


def normalize(path: str) -> list[str] | None:
    """Split a wire path into segments; None when it escapes or is invalid."""
    if not isinstance(path, str) or "\x00" in path:
        return None
    parts: list[str] = []
    for seg in path.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if not parts:
                return None
            parts.pop()
        else:
            parts.append(seg)
    return parts


def _attr(kind: str, size: int, mtime: int, mode: int) -> dict:
    return {"kind": kind, "size": size, "mtime": mtime, "mode": mode}


class MemStore:
    """Reference filesystem: plain dicts for directories, bytearrays for files."""

    class _File:
        __slots__ = ("data", "mode", "mtime")

        def __init__(self, mode: int, mtime: int):
            self.data = bytearray()
            self.mode = mode
            self.mtime = mtime

    class _Dir:
        __slots__ = ("children", "mode", "mtime")

        def __init__(self, mode: int, mtime: int):
            self.children: dict = {}
            self.mode = mode
            self.mtime = mtime

    def __init__(self, now_ms: int = 0):
        self._root = MemStore._Dir(ROOT_MODE, now_ms)

    # -- internal walks ----------------------------------------------------

    def _node(self, parts: list[str]):
        node = self._root
        for seg in parts:
            if not isinstance(node, MemStore._Dir):
                raise FsError("not-dir")
            if seg not in node.children:
                raise FsError("not-found")
            node = node.children[seg]
        return node

    def _parent(self, parts: list[str]) -> "MemStore._Dir":
        node = self._node(parts[:-1])
        if not isinstance(node, MemStore._Dir):
            raise FsError("not-dir")
        return node

    # -- queries -----------------------------------------------------------

    def getattr(self, parts: list[str]) -> dict:
        node = self._node(parts)
        if isinstance(node, MemStore._Dir):
            return _attr("directory", 0, node.mtime, node.mode)
        return _attr("file", len(node.data), node.mtime, node.mode)

    def readdir(self, parts: list[str]) -> list[str]:
        node = self._node(parts)
        if not isinstance(node, MemStore._Dir):
            raise FsError("not-dir")
        return sorted(node.children)

    def read_range(self, parts: list[str], offset: int, length: int) -> bytes:
        node = self._node(parts)
        if isinstance(node, MemStore._Dir):
            raise FsError("is-dir")
        return bytes(node.data[offset:offset + length])

    # -- mutations ----------------------------------------------------------

    def create(self, parts: list[str], mode: int, now_ms: int):
        if not parts:
            raise FsError("exists")
        parent = self._parent(parts)
        if parts[-1] in parent.children:
            raise FsError("exists")
        parent.children[parts[-1]] = MemStore._File(mode & FILE_MODE_MASK, now_ms)
        parent.mtime = now_ms

    def mkdir(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("exists")
        parent = self._parent(parts)
        if parts[-1] in parent.children:
            raise FsError("exists")
        parent.children[parts[-1]] = MemStore._Dir(DIR_MODE, now_ms)
        parent.mtime = now_ms

    def write_range(self, parts: list[str], offset: int, data: bytes, now_ms: int):
        node = self._node(parts)
        if isinstance(node, MemStore._Dir):
            raise FsError("is-dir")
        if offset > len(node.data):
            node.data.extend(b"\x00" * (offset - len(node.data)))
        node.data[offset:offset + len(data)] = data
        node.mtime = now_ms

    def truncate(self, parts: list[str], size: int, now_ms: int):
        node = self._node(parts)
        if isinstance(node, MemStore._Dir):
            raise FsError("is-dir")
        if size < len(node.data):
            del node.data[size:]
        else:
            node.data.extend(b"\x00" * (size - len(node.data)))
        node.mtime = now_ms

    def unlink(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("is-dir")
        parent = self._parent(parts)
        node = parent.children.get(parts[-1])
        if node is None:
            raise FsError("not-found")
        if isinstance(node, MemStore._Dir):
            raise FsError("is-dir")
        del parent.children[parts[-1]]
        parent.mtime = now_ms

    def rmdir(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("io")
        parent = self._parent(parts)
        node = parent.children.get(parts[-1])
        if node is None:
            raise FsError("not-found")
        if not isinstance(node, MemStore._Dir):
            raise FsError("not-dir")
        if node.children:
            raise FsError("not-empty")
        del parent.children[parts[-1]]
        parent.mtime = now_ms

    def rename(self, src: list[str], dst: list[str], now_ms: int):
        if not src:
            raise FsError("io")
        src_parent = self._parent(src)
        if src[-1] not in src_parent.children:
            raise FsError("not-found")
        if src == dst:
            return
        if dst[:len(src)] == src:
            raise FsError("io")
        dst_parent = self._parent(dst) if dst else None
        if dst_parent is None or dst[-1] in dst_parent.children:
            raise FsError("exists")
        dst_parent.children[dst[-1]] = src_parent.children.pop(src[-1])
        src_parent.mtime = now_ms
        dst_parent.mtime = now_ms


class DirStore:
    """The same contract over a real directory.

    Timestamps are forced with utime after every mutation so they match
    the logical clock instead of the kernel's idea of now.
    """

    def __init__(self, root: str, now_ms: int = 0):
        root = os.path.realpath(root)
        if not os.path.isdir(root):
            raise FsError("not-dir")
        self._root = root
        os.chmod(root, ROOT_MODE)
        self._stamp([], now_ms)

    def _real(self, parts: list[str]) -> str:
        return os.path.join(self._root, *parts) if parts else self._root

    def _stamp(self, parts: list[str], now_ms: int):
        os.utime(self._real(parts), ns=(now_ms * 1_000_000, now_ms * 1_000_000))

    def _lstat(self, parts: list[str]):
        # Maps walk errors exactly like MemStore._node: missing segment or
        # missing leaf -> not-found, file used as directory -> not-dir.
        try:
            return os.lstat(self._real(parts))
        except FileNotFoundError:
            raise FsError("not-found") from None
        except NotADirectoryError:
            raise FsError("not-dir") from None

    def _require_parent_dir(self, parts: list[str]):
        st = self._lstat(parts[:-1])
        if not stat.S_ISDIR(st.st_mode):
            raise FsError("not-dir")

    @staticmethod
    def _kind(st) -> str:
        if stat.S_ISDIR(st.st_mode):
            return "directory"
        if stat.S_ISREG(st.st_mode):
            return "file"
        raise FsError("io")

    # -- queries -----------------------------------------------------------

    def getattr(self, parts: list[str]) -> dict:
        st = self._lstat(parts)
        kind = self._kind(st)
        size = 0 if kind == "directory" else st.st_size
        return _attr(kind, size, st.st_mtime_ns // 1_000_000, stat.S_IMODE(st.st_mode))

    def readdir(self, parts: list[str]) -> list[str]:
        st = self._lstat(parts)
        if not stat.S_ISDIR(st.st_mode):
            raise FsError("not-dir")
        return sorted(os.listdir(self._real(parts)))

    def read_range(self, parts: list[str], offset: int, length: int) -> bytes:
        st = self._lstat(parts)
        if stat.S_ISDIR(st.st_mode):
            raise FsError("is-dir")
        fd = os.open(self._real(parts), os.O_RDONLY)
        try:
            return os.pread(fd, length, offset)
        finally:
            os.close(fd)

    # -- mutations ----------------------------------------------------------

    def create(self, parts: list[str], mode: int, now_ms: int):
        if not parts:
            raise FsError("exists")
        self._require_parent_dir(parts)
        try:
            fd = os.open(self._real(parts), os.O_WRONLY | os.O_CREAT | os.O_EXCL,
                         mode & FILE_MODE_MASK)
        except FileExistsError:
            raise FsError("exists") from None
        os.fchmod(fd, mode & FILE_MODE_MASK)
        os.close(fd)
        self._stamp(parts, now_ms)
        self._stamp(parts[:-1], now_ms)

    def mkdir(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("exists")
        self._require_parent_dir(parts)
        try:
            os.mkdir(self._real(parts), DIR_MODE)
        except FileExistsError:
            raise FsError("exists") from None
        os.chmod(self._real(parts), DIR_MODE)
        self._stamp(parts, now_ms)
        self._stamp(parts[:-1], now_ms)

    def write_range(self, parts: list[str], offset: int, data: bytes, now_ms: int):
        st = self._lstat(parts)
        if stat.S_ISDIR(st.st_mode):
            raise FsError("is-dir")
        fd = os.open(self._real(parts), os.O_WRONLY)
        try:
            os.pwrite(fd, data, offset)
        finally:
            os.close(fd)
        self._stamp(parts, now_ms)

    def truncate(self, parts: list[str], size: int, now_ms: int):
        st = self._lstat(parts)
        if stat.S_ISDIR(st.st_mode):
            raise FsError("is-dir")
        os.truncate(self._real(parts), size)
        self._stamp(parts, now_ms)

    def unlink(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("is-dir")
        st = self._lstat(parts)
        if stat.S_ISDIR(st.st_mode):
            raise FsError("is-dir")
        os.unlink(self._real(parts))
        self._stamp(parts[:-1], now_ms)

    def rmdir(self, parts: list[str], now_ms: int):
        if not parts:
            raise FsError("io")
        st = self._lstat(parts)
        if not stat.S_ISDIR(st.st_mode):
            raise FsError("not-dir")
        try:
            os.rmdir(self._real(parts))
        except OSError:
            raise FsError("not-empty") from None
        self._stamp(parts[:-1], now_ms)

    def rename(self, src: list[str], dst: list[str], now_ms: int):
        if not src:
            raise FsError("io")
        self._lstat(src)
        if src == dst:
            return
        if dst[:len(src)] == src:
            raise FsError("io")
        if not dst:
            raise FsError("exists")
        self._require_parent_dir(dst)
        try:
            self._lstat(dst)
        except FsError as exc:
            if exc.code != "not-found":
                raise
        else:
            raise FsError("exists")
        os.rename(self._real(src), self._real(dst))
        self._stamp(src[:-1], now_ms)
        self._stamp(dst[:-1], now_ms)


def walk_tree(store) -> dict:
    """Full snapshot {path: attr + content hex} for exact store comparison."""
    snapshot: dict[str, dict] = {}

    def visit(parts: list[str]):
        path = "/" + "/".join(parts)
        attr = store.getattr(parts)
        entry = dict(attr)
        if attr["kind"] == "file":
            data = b""
            while True:
                piece = store.read_range(parts, len(data), 1 << 16)
                data += piece
                if len(piece) < (1 << 16):
                    break
            entry["content"] = data.hex()
        snapshot[path] = entry
        if attr["kind"] == "directory":
            for name in store.readdir(parts):
                visit(parts + [name])

    visit([])
    return snapshot
