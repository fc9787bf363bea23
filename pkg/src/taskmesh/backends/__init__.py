"""Executor backends: who actually hosts a task instance.

Both implementations expose the same surface: create_instance,
destroy_instance, list_instances, plus instance_state so a parent can
tell a cancellation apart from a crash after its child connection drops.
"""


class BackendError(Exception):
    pass


class UnknownNode(BackendError):
    pass


class CapacityExceeded(BackendError):
    pass


class UnknownInstance(BackendError):
    pass


class SpawnRejected(BackendError):
    """Backend refused to create the instance; message carries the reason."""
