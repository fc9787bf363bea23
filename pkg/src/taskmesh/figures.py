"""Plots for bench reports; matplotlib stays an import-on-use dependency."""

import os


def _label_size(size: int) -> str:
    if size % (1 << 20) == 0:
        return f"{size >> 20} MiB"
    if size % (1 << 10) == 0:
        return f"{size >> 10} KiB"
    return f"{size} B"


def render_figures(results, out_dir: str) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in results if r.error is None]
    paths = []

    # access time vs rtt, one line per file size (single-file timing, so any
    # count works; keep the smallest for each size/rtt pair)
    by_size = {}
    for r in sorted(ok, key=lambda r: r.count):
        by_size.setdefault(r.size, {}).setdefault(r.profile.rtt, r.access_ms)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for size in sorted(by_size):
        points = sorted(by_size[size].items())
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", label=_label_size(size))
    threshold = results[0].threshold if results else 1000.0
    ax.axhline(threshold, color="red", linestyle="--", linewidth=1,
               label=f"{threshold:g} ms budget")
    ax.set_xlabel("round-trip time (ms)")
    ax.set_ylabel("access time, open + read (ms)")
    ax.set_yscale("log")
    ax.set_title("per-file access time vs network latency")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    path = os.path.join(out_dir, "access_vs_rtt.png")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    paths.append(path)

    # whole-run duration vs file count at the worst latency in the matrix
    if ok:
        worst_rtt = max(r.profile.rtt for r in ok)
        rows = [r for r in ok if r.profile.rtt == worst_rtt]
        fig, ax = plt.subplots(figsize=(7, 4.5))
        sizes = sorted({r.size for r in rows})
        for size in sizes:
            points = sorted((r.count, r.aggregate_ms)
                            for r in rows if r.size == size)
            ax.plot([p[0] for p in points], [p[1] for p in points],
                    marker="s", label=_label_size(size))
        ax.set_xlabel("file count")
        ax.set_ylabel("aggregate time (ms)")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(f"whole-run duration vs file count (rtt {worst_rtt:g} ms)")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        path = os.path.join(out_dir, "aggregate_vs_count.png")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths
