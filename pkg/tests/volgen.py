"""Randomized broker call sequences checked against a dict-mirror oracle."""

import random

from taskmesh.volumes import (
    AuthRejected,
    EndpointUnreachable,
    UnknownVolume,
    VolumeBroker,
    VolumeBusy,
    VolumeDeleted,
)

GOOD_TOKEN = "tok"


def stub_prober(endpoint: str, token):
    if endpoint.startswith("dead"):
        raise EndpointUnreachable(endpoint)
    if token != GOOD_TOKEN:
        raise AuthRejected(endpoint)


def run_lifecycle_fuzz(n_calls: int, seed: int) -> dict:
    """Drive n_calls random broker calls; assert every invariant after each.

    Returns op counts so callers can confirm the mix actually exercised
    the interesting paths.
    """
    rng = random.Random(seed)
    broker = VolumeBroker(prober=stub_prober)
    # oracle: volume id -> (published set, deleted flag)
    mirror: dict[str, tuple[set, bool]] = {}
    tasks = [f"task-{i}" for i in range(6)]
    counts = {"create": 0, "create_refused": 0, "publish": 0, "publish_deleted": 0,
              "unpublish": 0, "delete": 0, "delete_busy": 0, "unknown": 0}

    def any_volume():
        if mirror and rng.random() < 0.9:
            return rng.choice(sorted(mirror))
        counts["unknown"] += 1
        return f"vol-{rng.randint(5000, 9999)}"

    for _ in range(n_calls):
        op = rng.choices(
            ["create", "publish", "unpublish", "delete", "info"],
            weights=[15, 30, 25, 20, 10])[0]
        if op == "create":
            kind = rng.random()
            if kind < 0.2:
                try:
                    broker.create_volume(f"dead-{rng.randint(0, 99)}", GOOD_TOKEN)
                    raise AssertionError("unreachable endpoint accepted")
                except EndpointUnreachable:
                    counts["create_refused"] += 1
            elif kind < 0.4:
                try:
                    broker.create_volume(f"good-{rng.randint(0, 99)}", "wrong")
                    raise AssertionError("bad token accepted")
                except AuthRejected:
                    counts["create_refused"] += 1
            else:
                vid = broker.create_volume(f"good-{rng.randint(0, 99)}", GOOD_TOKEN)
                assert vid not in mirror
                mirror[vid] = (set(), False)
                counts["create"] += 1
        elif op == "publish":
            vid = any_volume()
            task = rng.choice(tasks)
            if vid not in mirror:
                try:
                    broker.publish_volume(vid, task)
                    raise AssertionError("unknown volume published")
                except UnknownVolume:
                    pass
            else:
                published, deleted = mirror[vid]
                if deleted:
                    try:
                        broker.publish_volume(vid, task)
                        raise AssertionError("deleted volume handed out a mount")
                    except VolumeDeleted:
                        counts["publish_deleted"] += 1
                else:
                    before = set(published)
                    mount = broker.publish_volume(vid, task)
                    assert mount["mount_path"] == "/workspace"
                    assert mount["endpoint"].startswith("good-")
                    if task in before:  # idempotent re-publish
                        assert broker.publish_volume(vid, task) == mount
                    published.add(task)
                    counts["publish"] += 1
        elif op == "unpublish":
            vid = any_volume()
            task = rng.choice(tasks)
            if vid not in mirror:
                try:
                    broker.unpublish_volume(vid, task)
                    raise AssertionError("unknown volume unpublished")
                except UnknownVolume:
                    pass
            else:
                mirror[vid][0].discard(task)
                broker.unpublish_volume(vid, task)
                counts["unpublish"] += 1
        elif op == "delete":
            vid = any_volume()
            if vid not in mirror:
                try:
                    broker.delete_volume(vid)
                    raise AssertionError("unknown volume deleted")
                except UnknownVolume:
                    pass
            else:
                published, deleted = mirror[vid]
                if published:
                    try:
                        broker.delete_volume(vid)
                        raise AssertionError("busy volume deleted")
                    except VolumeBusy:
                        counts["delete_busy"] += 1
                else:
                    broker.delete_volume(vid)  # idempotent on deleted
                    mirror[vid] = (published, True)
                    counts["delete"] += 1
        else:
            vid = any_volume()
            if vid in mirror:
                record = broker.volume_record(vid)
                assert record.published_to == mirror[vid][0]

        # full-registry invariant sweep
        for record in broker.list_volumes():
            published, deleted = mirror[record.id]
            assert record.published_to == published
            assert record.state == (
                "deleted" if deleted
                else "published" if published
                else "created")
            if record.state == "deleted":
                assert not record.published_to, "deleted volume still published"
    return counts
