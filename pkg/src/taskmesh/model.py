"""Task identity, lifecycle state machine, and spec validation.

Everything here is plain data plus pure functions; objects are safe to
share across threads without locks.
"""

import re
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

TASK_ID_RE = re.compile(r"^[0-9a-f]{32}$")

# Values accepted as task inputs/outputs: JSON-compatible documents.
Document = None | bool | int | float | str | list | dict


class TaskState(str, Enum):
    CREATED = "created"
    SCHEDULED = "scheduled"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    CANCELED = "canceled"


TERMINAL_STATES = frozenset(
    {TaskState.COMPLETED, TaskState.FAILED, TaskState.CANCELED}
)

# (state, event) -> next state. Anything not listed is illegal.
_TRANSITIONS = {
    (TaskState.CREATED, "schedule"): TaskState.SCHEDULED,
    (TaskState.SCHEDULED, "start"): TaskState.RUNNING,
    (TaskState.RUNNING, "return"): TaskState.COMPLETED,
    (TaskState.RUNNING, "fail"): TaskState.FAILED,
    (TaskState.CREATED, "cancel"): TaskState.CANCELED,
    (TaskState.SCHEDULED, "cancel"): TaskState.CANCELED,
    (TaskState.RUNNING, "cancel"): TaskState.CANCELED,
}

LIFECYCLE_EVENTS = frozenset(event for _, event in _TRANSITIONS)


class IllegalTransition(Exception):
    def __init__(self, state: TaskState, event: str):
        super().__init__(f"no transition from {state.value!r} on {event!r}")
        self.state = state
        self.event = event


def transition(state: TaskState, event: str) -> TaskState:
    """Advance the lifecycle machine; raises IllegalTransition off the table."""
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(state, event) from None


def is_terminal(state: TaskState) -> bool:
    return state in TERMINAL_STATES


def new_task_id(rng=None) -> str:
    """128-bit id as 32 lowercase hex chars, drawn from rng when given."""
    if rng is None:
        return uuid.uuid4().hex
    return f"{rng.getrandbits(128):032x}"


@dataclass
class TaskSpec:
    """What to run: entrypoint name plus inputs, identity, and placement."""

    name: str
    entrypoint: str
    inputs: dict = field(default_factory=dict)
    id: str = ""
    parent: str | None = None
    placement: str | None = None
    workspace: str | None = None

    def __post_init__(self):
        if not self.id:
            self.id = new_task_id()

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {
            "id": self.id,
            "name": self.name,
            "entrypoint": self.entrypoint,
            "inputs": self.inputs,
        }
        if self.parent is not None:
            doc["parent"] = self.parent
        if self.placement is not None:
            doc["placement"] = self.placement
        if self.workspace is not None:
            doc["workspace"] = self.workspace
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "TaskSpec":
        return cls(
            id=doc["id"],
            name=doc["name"],
            entrypoint=doc["entrypoint"],
            inputs=doc.get("inputs", {}),
            parent=doc.get("parent"),
            placement=doc.get("placement"),
            workspace=doc.get("workspace"),
        )


@dataclass
class TaskResult:
    """Terminal outcome: a value, or an error {code, message}."""

    task: str
    value: Any = None
    error: dict | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @classmethod
    def completed(cls, task: str, value) -> "TaskResult":
        return cls(task=task, value=value)

    @classmethod
    def failed(cls, task: str, code: str, message: str = "") -> "TaskResult":
        return cls(task=task, error={"code": code, "message": message})


def _is_document(value) -> bool:
    if value is None or isinstance(value, (bool, int, str)):
        return True
    if isinstance(value, float):
        return value == value and value not in (float("inf"), float("-inf"))
    if isinstance(value, list):
        return all(_is_document(v) for v in value)
    if isinstance(value, dict):
        return all(isinstance(k, str) and _is_document(v) for k, v in value.items())
    return False


def validate_spec(spec: TaskSpec) -> list[dict]:
    """Return one {code, detail} entry per violated invariant; [] means valid.

    Violations are data, not exceptions: callers decide whether to raise.
    """
    violations = []
    if not isinstance(spec.id, str) or not TASK_ID_RE.match(spec.id or ""):
        violations.append({"code": "bad-id", "detail": f"id {spec.id!r} is not 32 lowercase hex chars"})
    if not spec.name:
        violations.append({"code": "empty-name", "detail": "name must be non-empty"})
    if not spec.entrypoint:
        violations.append({"code": "empty-entrypoint", "detail": "entrypoint must be non-empty"})
    if spec.parent is not None:
        if spec.parent == spec.id:
            violations.append({"code": "self-parent", "detail": "task cannot be its own parent"})
        elif not TASK_ID_RE.match(spec.parent):
            violations.append({"code": "bad-parent", "detail": f"parent {spec.parent!r} is not a task id"})
    if not isinstance(spec.inputs, dict):
        violations.append({"code": "bad-inputs", "detail": "inputs must be a map"})
    else:
        for key, value in spec.inputs.items():
            if not isinstance(key, str):
                violations.append({"code": "bad-inputs", "detail": f"input key {key!r} is not a string"})
            elif not _is_document(value):
                violations.append({"code": "bad-inputs", "detail": f"input {key!r} is not a document value"})
    if spec.placement is not None and (not isinstance(spec.placement, str) or not spec.placement):
        violations.append({"code": "bad-placement", "detail": "placement must be a non-empty string"})
    if spec.workspace is not None and (not isinstance(spec.workspace, str) or not spec.workspace):
        violations.append({"code": "bad-workspace", "detail": "workspace must be a non-empty volume id"})
    return violations
