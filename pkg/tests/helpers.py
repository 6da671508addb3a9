"""Builders shared across the test suite.

The stage markers in the tiny test templates ("[extract]", "[validate]",
"[converse]") let scripted rules target one pipeline stage by substring
without colliding with chat content that reappears in later histories.
"""

from __future__ import annotations

import random

from dyadchat.clock import VirtualClock
from dyadchat.domain import (
    AgentPolicy,
    Author,
    AuthorKind,
    ChatMessage,
    IdFactory,
    Participant,
    PromptTemplate,
    Session,
    SessionConfig,
    new_session,
)
from dyadchat.engine import OutboundQueue, Trigger, dispatch_due, enqueue_batch, on_new_input
from dyadchat.gateway import ScriptedBackend, ScriptedRule
from dyadchat.orchestrator import SessionRuntime

EXTRACT_MARK = "[extract]"
VALIDATE_MARK = "[validate]"
CONVERSE_MARK = "[converse]"


def make_policy(
    name: str = "test",
    delay_seconds_per_char: float = 2.5,
    max_history_messages: int = 50,
) -> AgentPolicy:
    return AgentPolicy(
        name=name,
        extraction_template=PromptTemplate(
            system_text="conversation analyst",
            user_text=f"{EXTRACT_MARK}\n${{userChatHistory}}",
        ),
        validation_template=PromptTemplate(
            system_text="conversation analyst",
            user_text=f"{VALIDATE_MARK}\n${{chatContext}}\nEvent: ${{eventContent}}",
        ),
        conversation_template=PromptTemplate(
            system_text="speak as ${username}",
            user_text=f"{CONVERSE_MARK}\nTasks:\n${{taskList}}\nHistory:\n${{userChatHistory}}",
        ),
        delay_seconds_per_char=delay_seconds_per_char,
        max_history_messages=max_history_messages,
    )


def make_session(
    policy: AgentPolicy | None = None,
    ids: IdFactory | None = None,
    names: tuple[str, str] = ("Alice", "Bob"),
) -> tuple[Session, IdFactory]:
    ids = ids or IdFactory.deterministic()
    policy = policy or make_policy()
    config = SessionConfig(
        participants=(
            Participant(user_id=ids.new_id("user"), display_name=names[0]),
            Participant(user_id=ids.new_id("user"), display_name=names[1]),
        ),
        policies=(policy, policy),
    )
    return new_session(config, ids=ids), ids


def scripted(*rules: tuple[str | None, str] | ScriptedRule) -> ScriptedBackend:
    """Build a backend from (contains, response) pairs; contains=None matches always."""
    built = [
        rule if isinstance(rule, ScriptedRule) else ScriptedRule(contains=rule[0], response=rule[1])
        for rule in rules
    ]
    return ScriptedBackend(built)


def human_message(
    session: Session, env: str, text: str, *, at: int, ids: IdFactory
) -> ChatMessage:
    message = ChatMessage(
        id=ids.new_id("message"),
        session=session.id,
        environment=env,
        author=session.human_author(env),
        text=text,
        sent_at=at,
    )
    session.append_message(message)
    return message


def agent_message(session: Session, env: str, text: str, *, at: int, ids: IdFactory) -> ChatMessage:
    message = ChatMessage(
        id=ids.new_id("message"),
        session=session.id,
        environment=env,
        author=session.agents[env].author(),
        text=text,
        sent_at=at,
    )
    session.append_message(message)
    return message


def make_runtime(
    backend: ScriptedBackend,
    policy: AgentPolicy | None = None,
    clock: VirtualClock | None = None,
) -> tuple[SessionRuntime, list[dict]]:
    session, ids = make_session(policy=policy)
    clock = clock or VirtualClock(0)
    events: list[dict] = []
    runtime = SessionRuntime(session, backend, clock=clock, ids=ids, sink=events.append)
    return runtime, events


def envs_of(runtime: SessionRuntime) -> tuple[str, str]:
    first, second = runtime.session.participants
    return first.user_id, second.user_id


def snapshot(session: Session) -> dict:
    """Comparable view of everything a restore must preserve."""
    return {
        "logs": {
            env: [
                (m.id, m.author.kind.value, m.author.display_name, m.text, m.sent_at)
                for m in log
            ]
            for env, log in session.envs.items()
        },
        "items": {
            env: [
                (i.id, i.content, i.status.value, i.created_at)
                for i in agent.knowledge_base.items
            ]
            for env, agent in session.agents.items()
        },
        "participants": [(p.user_id, p.display_name) for p in session.participants],
        "agent_names": {env: a.display_name for env, a in session.agents.items()},
    }


# ------------------------------------------------------------------ scenarios

CINEMA_UTTERANCE = "Yesterday I went to a cinema."
CINEMA_ITEM = "Alice told Bob that she went to a cinema on Sep. 12"
CINEMA_REPLY = "Oh, I went to a movie theater yesterday!"

# Stage markers of the shipped "first-time" preset prompts, usable as
# scripted-rule substrings.
PRESET_VALIDATE_MARK = "Please determine if the following event"
PRESET_EXTRACT_MARK = "describe it"
PRESET_CONVERSE_MARK = "# Tasks to complete"


def cinema_script() -> list[dict]:
    return [
        {"match": {"user_text_contains": PRESET_VALIDATE_MARK}, "response": "true"},
        {"match": {"user_text_contains": PRESET_EXTRACT_MARK}, "response": CINEMA_ITEM},
        {"match": {"user_text_contains": CINEMA_ITEM}, "response": f"Alice: {CINEMA_REPLY}"},
        {"match": "always", "response": "SKIP"},
    ]


def cinema_scenario() -> dict:
    return {
        "participants": ["Alice", "Bob"],
        "preset": "first-time",
        "script": cinema_script(),
        "timeline": [{"time_ms": 1000, "env": "Alice", "text": CINEMA_UTTERANCE}],
        "stop_time_ms": 300_000,
    }


def random_scenario(rng: random.Random, index: int) -> dict:
    """A randomized but internally consistent scenario.

    Varies message count and timing, whether extractions yield items or NONE,
    how many validation verdicts start out false, and whether generations
    reply (with one or more sentences) or skip.
    """
    names = [f"User{index}A", f"User{index}B"]
    message_count = rng.randint(1, 8)
    false_verdicts = rng.randint(0, 2)

    rules: list[dict] = []
    for _ in range(false_verdicts):
        rules.append(
            {
                "match": {"user_text_contains": PRESET_VALIDATE_MARK},
                "response": "false",
                "max_uses": 1,
            }
        )
    rules.append({"match": {"user_text_contains": PRESET_VALIDATE_MARK}, "response": "true"})

    replies = rng.randint(0, message_count)
    if replies:
        sentence_count = rng.randint(1, 3)
        reply = " ".join(f"Line {k} of note {index}." for k in range(sentence_count))
        rules.append(
            {
                "match": {"user_text_contains": PRESET_CONVERSE_MARK},
                "response": reply,
                "max_uses": replies,
            }
        )
    rules.append({"match": {"user_text_contains": PRESET_CONVERSE_MARK}, "response": "SKIP"})

    timeline = []
    at = 0
    texts = [f"note {index}-{k} from a human" for k in range(message_count)]
    # Message-specific extraction rules, newest first: an extraction request
    # contains the whole history, so the most recent message must win.
    for k in reversed(range(message_count)):
        if rng.random() < 0.7:
            response = f"Someone shared note {index}-{k}."
        else:
            response = "NONE"
        rules.append({"match": {"user_text_contains": texts[k]}, "response": response})
    rules.append({"match": "always", "response": "NONE"})

    for k in range(message_count):
        at += rng.randint(500, 120_000)
        timeline.append({"time_ms": at, "env": rng.choice(names), "text": texts[k]})

    return {
        "participants": names,
        "preset": "first-time",
        "script": rules,
        "timeline": timeline,
        "stop_time_ms": at + 400_000,
    }


# ------------------------------------------------------- queue invariant trial


def run_queue_invariant_trial(rng: random.Random) -> None:
    """One randomized interleaving of triggers, late batches, and dispatches.

    Asserts the single-batch invariant (everything pending shares the queue's
    current sequence) after every step, which also rules out stale dispatch:
    nothing with an outdated sequence can sit in the queue to be sent.
    """
    policy = make_policy()
    ids = IdFactory.deterministic()
    queue = OutboundQueue(environment="env-a")
    author = Author(kind=AuthorKind.AGENT, display_name="Peer")
    now = 0
    outstanding = []  # generation requests not yet fulfilled, possibly stale

    for _ in range(rng.randint(5, 40)):
        action = rng.choice(("trigger", "fulfill", "dispatch"))
        if action == "trigger":
            outstanding.append(on_new_input(queue, rng.choice(list(Trigger))))
            assert queue.pending == [], "clear must precede every new batch"
        elif action == "fulfill" and outstanding:
            request = outstanding.pop(rng.randrange(len(outstanding)))
            sentences = ["x" * rng.randint(1, 6) + "." for _ in range(rng.randint(1, 4))]
            dropped_before = queue.dropped_batches
            scheduled = enqueue_batch(queue, request, sentences, policy, now)
            if request.generation_seq != queue.generation_seq:
                assert scheduled == []
                assert queue.dropped_batches == dropped_before + 1
            else:
                assert [s.text for s in scheduled] == sentences
        elif action == "dispatch":
            now += rng.randint(1, 40_000)
            dispatch_due(queue, now, session_id="session", author=author, ids=ids)

        batch_seqs = {scheduled.generation_seq for scheduled in queue.pending}
        assert batch_seqs <= {queue.generation_seq}, (
            f"pending batch sequences {batch_seqs} diverge from queue "
            f"sequence {queue.generation_seq}"
        )
        dues = [scheduled.due_at for scheduled in queue.pending]
        assert dues == sorted(dues)
