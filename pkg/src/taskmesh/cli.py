"""Command line entry point.

Exit codes: 0 success, 1 domain error (task failed, endpoint refused,
bench threshold missed), 2 usage error.
"""

import argparse
import json
import sys
import time

from . import transport, wire
from .volumes import BrokerCallFailed, BrokerClient, VolumeBroker, VolumeError


def _parse_inputs(pairs):
    """`key=value` arguments; values parsed as documents when possible."""
    inputs = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--input expects key=value, got {pair!r}")
        try:
            value = json.loads(raw, parse_constant=_reject_constant)
        except ValueError:
            value = raw
        inputs[key] = value
    return inputs


def _reject_constant(name):
    raise ValueError(name)


class UsageError(Exception):
    pass


def _print_doc(value, file=None):
    file = sys.stdout if file is None else file
    file.write(wire.canonical_doc(value).decode("utf-8") + "\n")
    file.flush()


# -- run ----------------------------------------------------------------------


def cmd_run(args) -> int:
    inputs = _parse_inputs(args.input)
    if args.backend == "sim":
        from .backends.sim import NetworkProfile, SimBackend, SimKernel, run_root
        from .tasks_builtin import REGISTRY

        kernel = SimKernel(seed=args.seed, profile=NetworkProfile(
            rtt=args.rtt, bandwidth=args.bandwidth, jitter=args.jitter))
        backend = SimBackend(kernel, REGISTRY)
        result, _ = run_root(kernel, backend, args.entrypoint, inputs,
                             timeout=args.timeout)
    else:
        from .backends.process import ProcessBackend, run_root

        backend = ProcessBackend()
        try:
            result, _ = run_root(backend, args.entrypoint, inputs,
                                 timeout=args.timeout, seed=args.seed)
        finally:
            backend.close()
    if result.ok:
        _print_doc(result.value)
        return 0
    _print_doc(result.error, file=sys.stderr)
    return 1


# -- serve-task (child mode) ---------------------------------------------------


def cmd_serve_task(args) -> int:
    from .backends.process import serve_child

    return serve_child()


# -- export ---------------------------------------------------------------------


def _split_listen(listen: str):
    host, sep, port = listen.rpartition(":")
    if not sep:
        raise UsageError(f"--listen expects host:port, got {listen!r}")
    try:
        return host, int(port)
    except ValueError:
        raise UsageError(f"bad port in {listen!r}") from None


def cmd_export(args) -> int:
    from .netfs.service import BindFailure, ExportConfig, serve_export
    from .netfs.stores import FsError

    host, port = _split_listen(args.listen)
    config = ExportConfig(root=args.root, read_only=args.read_only, token=args.token)
    try:
        server = serve_export(config, host, port, broker=VolumeBroker())
    except (BindFailure, FsError, ValueError, OSError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"serving {args.root} at {server.endpoint}", flush=True)
    if args.once:
        server.close()
        return 0
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


# -- volume ---------------------------------------------------------------------


def _broker_client(args):
    conn = transport.connect(args.broker, timeout=5.0)
    conn.send(wire.hello("cli", token=args.token))
    return conn, BrokerClient(conn)


def cmd_volume(args) -> int:
    try:
        conn, client = _broker_client(args)
    except (transport.TransportError, OSError) as exc:
        print(f"broker unreachable: {exc}", file=sys.stderr)
        return 1
    try:
        if args.volume_cmd == "create":
            endpoint = args.endpoint or args.broker
            result = client.call("create", endpoint=endpoint, token=args.token)
            print(result["volume"])
        elif args.volume_cmd == "publish":
            result = client.call("publish", volume=args.volume, task=args.task)
            _print_doc(result["mount"])
        elif args.volume_cmd == "unpublish":
            client.call("unpublish", volume=args.volume, task=args.task)
            print("ok")
        elif args.volume_cmd == "delete":
            client.call("delete", volume=args.volume)
            print("ok")
        else:
            result = client.call("info", volume=args.volume)
            _print_doc(result)
        return 0
    except BrokerCallFailed as exc:
        _print_doc(exc.error, file=sys.stderr)
        return 1
    except (transport.TransportError, OSError) as exc:
        print(f"broker call failed: {exc}", file=sys.stderr)
        return 1
    finally:
        conn.close()


# -- bench ------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from . import bench

    if args.matrix:
        try:
            matrix = bench.load_matrix(args.matrix)
        except (OSError, ValueError) as exc:
            print(f"bad matrix file: {exc}", file=sys.stderr)
            return 1
    else:
        matrix = bench.default_matrix()
    results = bench.run_matrix(matrix, seed=args.seed)
    paths = bench.write_report(results, args.out, figures=not args.no_figures)
    for row in results:
        print(bench.format_row(row))
    report = bench.check_threshold(results)
    print(f"report: {' '.join(paths)}")
    print(f"{report['pass_count']} passed, {report['fail_count']} failed")
    ok = report["envelope_ok"]
    print("envelope: PASS" if ok else
          f"envelope: FAIL ({bench.format_row(report['worst_cell'])})")
    return 0 if ok else 1


# -- notebook ----------------------------------------------------------------------


def cmd_notebook(args) -> int:
    if args.backend == "sim":
        from .backends.sim import NetworkProfile, SimBackend, SimKernel, run_driver
        from .tasks_builtin import REGISTRY

        kernel = SimKernel(seed=args.seed, profile=NetworkProfile())
        backend = SimBackend(kernel, REGISTRY)

        def body(ctx):
            handle = ctx.spawn("notebook_stub")
            entry = ctx.await_log(handle)
            return entry[1] if entry else None

        url, _ = run_driver(kernel, backend, body)
        if url is None:
            return 1
        print(url, flush=True)
        return 0

    from .backends.process import ProcessBackend, ProcessHost
    from .runtime import RuntimeContext
    from .model import new_task_id
    from .tasks_builtin import REGISTRY

    backend = ProcessBackend()
    host = ProcessHost(backend.control_endpoint, seed=args.seed)
    try:
        ctx = RuntimeContext(new_task_id(host.rng), host, REGISTRY)
        handle = ctx.spawn("notebook_stub")
        entry = ctx.await_log(handle, timeout=30.0)
        if entry is None:
            print("notebook task produced no url", file=sys.stderr)
            return 1
        print(entry[1], flush=True)
        if args.once:
            return 0
        try:
            ctx.await_result(handle)
        except KeyboardInterrupt:
            pass
        return 0
    finally:
        host.shutdown()
        backend.close()


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskmesh",
        description="run container-style task workflows on your own machine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="spawn one task and print its result")
    p.add_argument("entrypoint")
    p.add_argument("--input", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--backend", choices=("sim", "process"), default="sim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rtt", type=float, default=0.0, help="sim round-trip ms")
    p.add_argument("--bandwidth", type=float, default=12_500_000.0,
                   help="sim bytes per second")
    p.add_argument("--jitter", type=float, default=0.0, help="sim jitter ms")
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("serve-task", help="internal: run as a spawned instance")
    p.set_defaults(fn=cmd_serve_task)

    p = sub.add_parser("export", help="serve a directory to tasks")
    p.add_argument("--root", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--read-only", action="store_true")
    p.add_argument("--token")
    p.add_argument("--once", action="store_true",
                   help="bind, print the endpoint, and exit")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("volume", help="volume lifecycle against a broker")
    vsub = p.add_subparsers(dest="volume_cmd", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--broker", required=True, metavar="HOST:PORT")
    common.add_argument("--token")
    q = vsub.add_parser("create", parents=[common])
    q.add_argument("--endpoint", help="export to bind (default: the broker itself)")
    for name in ("publish", "unpublish"):
        q = vsub.add_parser(name, parents=[common])
        q.add_argument("--volume", required=True)
        q.add_argument("--task", required=True)
    for name in ("delete", "info"):
        q = vsub.add_parser(name, parents=[common])
        q.add_argument("--volume", required=True)
    p.set_defaults(fn=cmd_volume)

    p = sub.add_parser("bench", help="file-access latency matrix on the sim")
    p.add_argument("--matrix", help="csv file: count,size,rtt_ms[,bandwidth_bps]")
    p.add_argument("--out", default="bench-out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("notebook", help="host a placeholder notebook task")
    p.add_argument("--backend", choices=("sim", "process"), default="process")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--once", action="store_true", help="exit after printing the url")
    p.set_defaults(fn=cmd_notebook)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except VolumeError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
