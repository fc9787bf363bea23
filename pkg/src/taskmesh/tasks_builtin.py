"""Built-in task bodies: small fixtures the CLI, benches, and tests share.

Every body takes the runtime context first and its declared inputs as
keywords, and returns a document (or raises to fail the task).
"""

import hashlib


def add(ctx, a, b):
    return a + b


def echo(ctx, **inputs):
    return inputs


def boom(ctx, message="kaboom"):
    raise RuntimeError(message)


def log_lines(ctx, lines=(), stream="out"):
    for line in lines:
        ctx.log(line, stream=stream)
    return len(lines)


def idle(ctx, ms=1000):
    ctx.host.sleep(ms)
    return ms


def arith_node(ctx, plan):
    """Interpret an expression tree, one subtask per operand.

    Plans: {"op": "const", "value": n} evaluates locally; {"op": "boom"}
    raises; {"op": "add"|"mul"|"sub", "args": [...]} spawns one arith_node
    child per argument and folds the results left to right.
    """
    op = plan["op"]
    if op == "const":
        return plan["value"]
    if op == "boom":
        raise RuntimeError("boom")
    handles = [ctx.spawn("arith_node", {"plan": arg}) for arg in plan["args"]]
    values = []
    for handle in handles:
        result = ctx.await_result(handle)
        if not result.ok:
            from .runtime import ChildFailed
            raise ChildFailed(result.error)
        values.append(result.value)
    total = values[0]
    for value in values[1:]:
        if op == "add":
            total = total + value
        elif op == "mul":
            total = total * value
        elif op == "sub":
            total = total - value
        else:
            raise ValueError(f"unknown op {op!r}")
    return total


def sum_leaf(ctx, n):
    return n * n


def diamond_mapper(ctx, ns):
    handles = [ctx.spawn("sum_leaf", {"n": n}) for n in ns]
    return _fold(ctx, handles)


def _fold(ctx, handles):
    total = 0
    for handle in handles:
        result = ctx.await_result(handle)
        if not result.ok:
            from .runtime import ChildFailed
            raise ChildFailed(result.error)
        total += result.value
    return total


def diamond_root(ctx, groups=((1, 2), (3, 4))):
    handles = [ctx.spawn("diamond_mapper", {"ns": list(group)}) for group in groups]
    return _fold(ctx, handles)


def read_workspace(ctx, path="data.bin"):
    ws = ctx.workspace()
    if ws is None:
        raise RuntimeError("no workspace mounted")
    data = ws.read_file(path)
    return {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}


def write_workspace(ctx, path, text):
    ws = ctx.workspace()
    if ws is None:
        raise RuntimeError("no workspace mounted")
    data = text.encode("utf-8")
    ws.write_file(path, data)
    return {"bytes": len(data)}


def bench_reader(ctx, files, window=16):
    """Open and read each file in turn, timing open+read per file.

    The release round trip is deliberately left out of the per-file time:
    the data is fully in hand before it.
    """
    ws = ctx.workspace()
    if ws is None:
        raise RuntimeError("no workspace mounted")
    fs = ws.fs
    clock = ctx.host.clock_ms
    per_file_ms = []
    total_bytes = 0
    start = clock()
    for path in files:
        t0 = clock()
        fh, attr = fs.open(path)
        data = fs.read_fh(fh, attr["size"], window=window)
        per_file_ms.append(clock() - t0)
        fs.release(fh)
        total_bytes += len(data)
    return {"per_file_ms": per_file_ms, "total_ms": clock() - start,
            "bytes": total_bytes}


def notebook_stub(ctx, host="127.0.0.1", hold_ms=3_600_000):
    """Long-lived placeholder: answer HTTP with a banner, log the url, idle."""
    import threading
    from http.server import BaseHTTPRequestHandler, HTTPServer

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            body = b"taskmesh notebook placeholder\n"
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = HTTPServer((host, 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = f"http://{host}:{server.server_port}/"
    ctx.log(url)
    ctx.host.sleep(hold_ms)
    server.shutdown()
    return url


# resolvable via its module:function name, deliberately absent from REGISTRY
def shout(ctx, text="hi"):
    return text.upper()


REGISTRY = {
    "add": add,
    "echo": echo,
    "boom": boom,
    "log_lines": log_lines,
    "idle": idle,
    "arith_node": arith_node,
    "sum_leaf": sum_leaf,
    "diamond_mapper": diamond_mapper,
    "diamond_root": diamond_root,
    "read_workspace": read_workspace,
    "write_workspace": write_workspace,
    "bench_reader": bench_reader,
    "notebook_stub": notebook_stub,
}
