import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskmesh import model
from taskmesh.model import TaskSpec, TaskState


LEGAL = {
    (TaskState.CREATED, "schedule", TaskState.SCHEDULED),
    (TaskState.SCHEDULED, "start", TaskState.RUNNING),
    (TaskState.RUNNING, "return", TaskState.COMPLETED),
    (TaskState.RUNNING, "fail", TaskState.FAILED),
    (TaskState.CREATED, "cancel", TaskState.CANCELED),
    (TaskState.SCHEDULED, "cancel", TaskState.CANCELED),
    (TaskState.RUNNING, "cancel", TaskState.CANCELED),
}


class TestLifecycle:
    def test_legal_transitions(self):
        for state, event, target in LEGAL:
            assert model.transition(state, event) is target

    def test_everything_else_is_illegal(self):
        legal_pairs = {(s, e) for s, e, _ in LEGAL}
        for state in TaskState:
            for event in sorted(model.LIFECYCLE_EVENTS):
                if (state, event) in legal_pairs:
                    continue
                with pytest.raises(model.IllegalTransition):
                    model.transition(state, event)

    def test_terminal_states_absorb_nothing(self):
        for state in model.TERMINAL_STATES:
            for event in sorted(model.LIFECYCLE_EVENTS):
                with pytest.raises(model.IllegalTransition):
                    model.transition(state, event)

    def test_cancel_reaches_canceled_from_any_non_terminal(self):
        for state in TaskState:
            if model.is_terminal(state):
                continue
            assert model.transition(state, "cancel") is TaskState.CANCELED

    def test_happy_path(self):
        s = TaskState.CREATED
        for event in ("schedule", "start", "return"):
            s = model.transition(s, event)
        assert s is TaskState.COMPLETED and model.is_terminal(s)

    @given(st.lists(st.sampled_from(sorted(model.LIFECYCLE_EVENTS)), max_size=12))
    @settings(max_examples=300)
    def test_machine_stays_in_the_six_states(self, events):
        state = TaskState.CREATED
        seen_terminal = False
        for event in events:
            try:
                state = model.transition(state, event)
            except model.IllegalTransition:
                continue
            assert not seen_terminal, "left a terminal state"
            assert state in TaskState
            seen_terminal = model.is_terminal(state)


class TestTaskIds:
    def test_shape(self):
        tid = model.new_task_id()
        assert len(tid) == 32 and set(tid) <= set("0123456789abcdef")

    def test_seeded_ids_are_reproducible(self):
        a = model.new_task_id(random.Random(5))
        b = model.new_task_id(random.Random(5))
        assert a == b and len(a) == 32

    def test_unseeded_ids_are_distinct(self):
        assert len({model.new_task_id() for _ in range(64)}) == 64


class TestTaskSpec:
    def test_auto_id(self):
        spec = TaskSpec(name="add", entrypoint="taskmesh.tasks_builtin:add")
        assert model.validate_spec(spec) == []

    def test_doc_round_trip(self):
        spec = TaskSpec(name="add", entrypoint="m:f", inputs={"a": 1},
                        parent=model.new_task_id(), placement="node-1",
                        workspace="vol-7")
        assert TaskSpec.from_doc(spec.to_doc()) == spec

    def test_optional_fields_omitted_from_doc(self):
        doc = TaskSpec(name="n", entrypoint="m:f").to_doc()
        assert set(doc) == {"id", "name", "entrypoint", "inputs"}

    def test_validation_codes(self):
        spec = TaskSpec(name="", entrypoint="", id="XYZ", parent="XYZ",
                        inputs={"bad": math.inf}, placement="", workspace="")
        codes = {v["code"] for v in model.validate_spec(spec)}
        assert codes == {"bad-id", "empty-name", "empty-entrypoint", "self-parent",
                         "bad-inputs", "bad-placement", "bad-workspace"}

    def test_bad_parent_distinct_from_self_parent(self):
        spec = TaskSpec(name="n", entrypoint="m:f", parent="not-hex")
        codes = {v["code"] for v in model.validate_spec(spec)}
        assert codes == {"bad-parent"}


class TestTaskResult:
    def test_completed(self):
        r = model.TaskResult.completed("t1", {"sum": 3})
        assert r.ok and r.value == {"sum": 3} and r.error is None

    def test_failed(self):
        r = model.TaskResult.failed("t1", "boom", "it broke")
        assert not r.ok and r.error == {"code": "boom", "message": "it broke"}
