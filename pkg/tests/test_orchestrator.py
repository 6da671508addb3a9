from __future__ import annotations

import pytest

from dyadchat.clock import VirtualClock
from dyadchat.domain import DomainError, InfoItem, InfoItemStatus
from dyadchat.engine import build_task_list
from dyadchat.gateway import ScriptedBackend, ScriptedRule
from helpers import (
    CONVERSE_MARK,
    EXTRACT_MARK,
    VALIDATE_MARK,
    envs_of,
    make_runtime,
    scripted,
)

CINEMA_ITEM = "Alice told Bob that she went to a cinema on Sep. 12"
CINEMA_REPLY = "Oh, I went to a movie theater yesterday!"


def cinema_backend(verdict: str = "true") -> ScriptedBackend:
    return scripted(
        (VALIDATE_MARK, verdict),
        (EXTRACT_MARK, CINEMA_ITEM),
        (CINEMA_ITEM, f"Alice: {CINEMA_REPLY}"),
        (None, "SKIP"),
    )


def events_of_type(events: list[dict], kind: str) -> list[dict]:
    return [event for event in events if event["type"] == kind]


def test_human_message_extracts_transfers_and_regenerates() -> None:
    runtime, events = make_runtime(cinema_backend())
    alice_env, bob_env = envs_of(runtime)
    runtime.clock.set_ms(1000)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")

    kb = runtime.session.agents[bob_env].knowledge_base
    assert [item.content for item in kb.items] == [CINEMA_ITEM]
    # both environments regenerated: the target on item arrival, the source locally
    generations = events_of_type(events, "generation")
    assert [g["env"] for g in generations] == [bob_env, alice_env]
    assert generations[0]["outcome"] == "reply"
    assert generations[0]["trigger"] == "info_item_arrival"
    assert generations[1]["outcome"] == "skip"
    assert generations[1]["trigger"] == "human_message"


def test_none_extraction_skips_transfer_but_still_regenerates() -> None:
    backend = scripted((EXTRACT_MARK, "NONE"), (None, "SKIP"))
    runtime, events = make_runtime(backend)
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "hmm")

    assert runtime.session.agents[bob_env].knowledge_base.items == []
    assert events_of_type(events, "transfer") == []
    extraction = events_of_type(events, "extraction")[0]
    assert extraction["outcome"] == "none"
    assert [g["env"] for g in events_of_type(events, "generation")] == [alice_env]


def test_extraction_gateway_error_degrades_gracefully() -> None:
    class FailsExtraction:
        def __init__(self) -> None:
            self.inner = scripted((None, "SKIP"))

        def complete(self, request):
            if EXTRACT_MARK in request.user_text:
                from dyadchat.gateway import TransportError

                raise TransportError("llm down")
            return self.inner.complete(request)

    runtime, events = make_runtime(FailsExtraction())
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "hello?")

    assert runtime.gateway_error_count == 1
    errors = events_of_type(events, "error")
    assert errors[0]["where"] == "extraction"
    assert events_of_type(events, "transfer") == []
    # local regeneration still fired
    assert [g["env"] for g in events_of_type(events, "generation")] == [alice_env]


def test_transfer_preserves_arrival_order_and_clears_target_queue() -> None:
    runtime, events = make_runtime(cinema_backend())
    alice_env, bob_env = envs_of(runtime)
    first = InfoItem(
        id="item-1", session=runtime.session.id, source_env=alice_env,
        target_env=bob_env, content="first fact", created_at=0,
    )
    second = InfoItem(
        id="item-2", session=runtime.session.id, source_env=alice_env,
        target_env=bob_env, content="second fact", created_at=1,
    )
    runtime.transfer(first)
    seq_after_first = runtime.queues[bob_env].generation_seq
    runtime.transfer(second)
    kb = runtime.session.agents[bob_env].knowledge_base
    assert [item.id for item in kb.items] == ["item-1", "item-2"]
    assert runtime.queues[bob_env].generation_seq == seq_after_first + 1


def test_item_targeting_its_own_source_is_unconstructible() -> None:
    with pytest.raises(DomainError):
        InfoItem(
            id="bad", session="s", source_env="env", target_env="env",
            content="loop", created_at=0,
        )


def test_dispatch_appends_log_and_runs_validation_once() -> None:
    runtime, events = make_runtime(cinema_backend())
    alice_env, bob_env = envs_of(runtime)
    runtime.clock.set_ms(1000)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")

    due = runtime.next_due_ms()
    assert due == 1000 + round(2.5 * len(CINEMA_REPLY) * 1000)
    runtime.clock.set_ms(due)
    dispatched = runtime.dispatch_ready(due)

    assert [m.text for m in dispatched] == [CINEMA_REPLY]
    assert [m.text for m in runtime.session.envs[bob_env][-1:]] == [CINEMA_REPLY]
    validations = events_of_type(events, "validation")
    assert len(validations) == 1
    assert validations[0]["verdict"] == "true"
    assert validations[0]["status"] == "delivered"
    item = runtime.session.agents[bob_env].knowledge_base.items[0]
    assert item.status is InfoItemStatus.DELIVERED


def test_multi_sentence_dispatch_validates_once() -> None:
    backend = scripted(
        (VALIDATE_MARK, "true"),
        (EXTRACT_MARK, CINEMA_ITEM),
        (CINEMA_ITEM, "Alice: One. Two!"),
        (None, "SKIP"),
    )
    runtime, events = make_runtime(backend)
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    # both sentences due: 4 chars -> 10000, + 4 chars -> 20000
    runtime.clock.set_ms(20000)
    dispatched = runtime.dispatch_ready(20000)
    assert [m.text for m in dispatched] == ["One.", "Two!"]
    dispatch_events = events_of_type(events, "dispatch")
    assert len(dispatch_events) == 1
    assert len(dispatch_events[0]["messages"]) == 2
    assert len(events_of_type(events, "validation")) == 1


def test_empty_dispatch_is_a_noop() -> None:
    runtime, events = make_runtime(cinema_backend())
    assert runtime.dispatch_ready(10_000) == []
    assert events_of_type(events, "dispatch") == []
    assert events_of_type(events, "validation") == []


def test_false_verdict_keeps_item_pending_and_in_task_list() -> None:
    runtime, events = make_runtime(cinema_backend(verdict="false"))
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    runtime.clock.set_ms(10**9)
    runtime.dispatch_ready(10**9)

    item = runtime.session.agents[bob_env].knowledge_base.items[0]
    assert item.pending
    assert events_of_type(events, "validation")[0]["verdict"] == "false"
    task_list = build_task_list(runtime.session.agents[bob_env].knowledge_base)
    assert CINEMA_ITEM in task_list


def test_unparsable_verdict_keeps_item_pending() -> None:
    runtime, events = make_runtime(cinema_backend(verdict="maybe"))
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    runtime.clock.set_ms(10**9)
    runtime.dispatch_ready(10**9)

    assert runtime.session.agents[bob_env].knowledge_base.items[0].pending
    validation = events_of_type(events, "validation")[0]
    assert validation["verdict"] == "unparsable"
    assert validation["status"] == "pending"


def test_validation_pass_with_no_pending_items_makes_no_calls() -> None:
    backend = cinema_backend()
    runtime, _ = make_runtime(backend)
    alice_env, _ = envs_of(runtime)
    uses_before = [rule.uses for rule in backend.rules]
    runtime.run_validation_pass(alice_env)
    assert [rule.uses for rule in backend.rules] == uses_before


def test_delivered_item_never_validated_again() -> None:
    backend = cinema_backend()
    runtime, events = make_runtime(backend)
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    runtime.clock.set_ms(10**9)
    runtime.dispatch_ready(10**9)
    assert len(events_of_type(events, "validation")) == 1
    runtime.run_validation_pass(bob_env)  # nothing pending anymore
    assert len(events_of_type(events, "validation")) == 1
    assert build_task_list(runtime.session.agents[bob_env].knowledge_base) == "(no tasks)"


def test_validation_gateway_error_leaves_item_pending() -> None:
    class FailsValidation:
        def __init__(self) -> None:
            self.inner = cinema_backend()

        def complete(self, request):
            if VALIDATE_MARK in request.user_text:
                from dyadchat.gateway import TransportError

                raise TransportError("validator down")
            return self.inner.complete(request)

    runtime, events = make_runtime(FailsValidation())
    alice_env, bob_env = envs_of(runtime)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    runtime.clock.set_ms(10**9)
    runtime.dispatch_ready(10**9)
    assert runtime.session.agents[bob_env].knowledge_base.items[0].pending
    assert any(e["code"] == "gateway_error" and e["where"] == "validation"
               for e in events_of_type(events, "error"))


def test_skip_sentinel_is_never_dispatched() -> None:
    backend = scripted((EXTRACT_MARK, "NONE"), (None, "SKIP"))
    runtime, events = make_runtime(backend)
    alice_env, _ = envs_of(runtime)
    runtime.on_human_message(alice_env, "hello")
    assert runtime.next_due_ms() is None
    runtime.clock.set_ms(10**9)
    assert runtime.dispatch_ready(10**9) == []
    assert all("SKIP" not in m.text for log in runtime.session.envs.values() for m in log)


def test_environment_logs_are_isolated() -> None:
    runtime, _ = make_runtime(cinema_backend())
    alice_env, bob_env = envs_of(runtime)
    runtime.clock.set_ms(1000)
    runtime.on_human_message(alice_env, "Yesterday I went to a cinema.")
    runtime.clock.set_ms(500_000)
    runtime.on_human_message(bob_env, "hi there")
    runtime.clock.set_ms(10**9)
    runtime.dispatch_ready(10**9)

    alice_ids = {m.id for m in runtime.session.envs[alice_env]}
    bob_ids = {m.id for m in runtime.session.envs[bob_env]}
    assert alice_ids.isdisjoint(bob_ids)
    assert all(m.environment == alice_env for m in runtime.session.envs[alice_env])
    assert all(m.environment == bob_env for m in runtime.session.envs[bob_env])


def test_generation_gateway_error_counts_and_continues() -> None:
    class FailsGeneration:
        def __init__(self) -> None:
            self.inner = scripted((EXTRACT_MARK, "NONE"))

        def complete(self, request):
            if CONVERSE_MARK in request.user_text:
                from dyadchat.gateway import TransportError

                raise TransportError("generator down")
            return self.inner.complete(request)

    runtime, events = make_runtime(FailsGeneration())
    alice_env, _ = envs_of(runtime)
    message = runtime.on_human_message(alice_env, "hello")
    assert message.text == "hello"
    assert runtime.gateway_error_count == 1
    assert any(e["where"] == "generation" for e in events_of_type(events, "error"))


def test_exhausted_generation_rule_reuses_fallback() -> None:
    backend = ScriptedBackend(
        [
            ScriptedRule(contains=EXTRACT_MARK, response="NONE"),
            ScriptedRule(contains=CONVERSE_MARK, response="First reply.", max_uses=1),
            ScriptedRule(contains=CONVERSE_MARK, response="SKIP"),
        ]
    )
    runtime, events = make_runtime(backend)
    alice_env, _ = envs_of(runtime)
    runtime.clock.set_ms(1000)
    runtime.on_human_message(alice_env, "one")
    runtime.clock.set_ms(2000)
    runtime.on_human_message(alice_env, "two")
    outcomes = [g["outcome"] for g in events_of_type(events, "generation")]
    assert outcomes == ["reply", "skip"]
    # the second human message cleared the un-dispatched first reply
    assert runtime.queues[alice_env].pending == []
    assert runtime.next_due_ms() is None
