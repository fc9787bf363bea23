"""Decentralized task workflows with a networked workspace filesystem.

Tasks spawn subtasks straight against a backend (simulated cluster or
local OS processes) and stream results directly to their parents over a
length-prefixed framed protocol. Workspaces are directories exported
over the same protocol and mounted into tasks by a volume broker.
"""

from .model import TaskResult, TaskSpec, TaskState, new_task_id, validate_spec
from .runtime import ChildFailed, RuntimeContext, TaskHandle, Workspace, serve_task

__version__ = "0.1.0"

__all__ = [
    "ChildFailed",
    "RuntimeContext",
    "TaskHandle",
    "TaskResult",
    "TaskSpec",
    "TaskState",
    "Workspace",
    "new_task_id",
    "serve_task",
    "validate_spec",
    "__version__",
]
