"""Task-conditioned response generation and the outgoing message scheduler.

Generated replies are split into sentences and queued with per-sentence
delays proportional to character count (one Unicode scalar value = one
character), mimicking human typing pace. Any new input — a human message or
an info item arriving from the peer agent — clears the environment's pending
queue and triggers exactly one regeneration, so the queue only ever holds
sentences from a single generation batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .domain import (
    AgentPolicy,
    Author,
    ChatMessage,
    IdFactory,
    KnowledgeBase,
    MessageId,
    SessionId,
    UserId,
    render,
    serialize_history,
)
from .gateway import CONVERSATION_TEMPERATURE, CompletionRequest

SKIP_SENTINEL = "SKIP"
EMPTY_TASK_LIST = "(no tasks)"


class Trigger(Enum):
    HUMAN_MESSAGE = "human_message"
    INFO_ITEM_ARRIVAL = "info_item_arrival"


@dataclass(frozen=True)
class ScheduledMessage:
    environment: UserId
    text: str  # one sentence
    due_at: int  # milliseconds since epoch
    generation_seq: int


@dataclass(frozen=True)
class GenerationRequest:
    """Ticket emitted by a queue clear; its batch is only valid while the
    queue's generation sequence still matches."""

    environment: UserId
    generation_seq: int
    trigger: Trigger


@dataclass
class OutboundQueue:
    """Per-environment FIFO of scheduled sentences from one generation batch."""

    environment: UserId
    generation_seq: int = 0
    pending: list[ScheduledMessage] = field(default_factory=list)
    dropped_batches: int = 0

    def next_due_ms(self) -> int | None:
        return self.pending[0].due_at if self.pending else None


def build_task_list(kb: KnowledgeBase) -> str:
    """Pending items, arrival order, one ``- content`` line each."""
    lines = [f"- {item.content}" for item in kb.pending_items()]
    return "\n".join(lines) if lines else EMPTY_TASK_LIST


def strip_name_prefix(text: str, username: str) -> str:
    """Remove one leading ``username:`` (optionally followed by a space)."""
    prefix = f"{username}:"
    if not text.startswith(prefix):
        return text
    rest = text[len(prefix):]
    if rest.startswith(" "):
        rest = rest[1:]
    return rest


def split_sentences(text: str, delimiters: frozenset[str]) -> list[str]:
    """Split after each delimiter character, keeping the delimiter attached.

    Fragments are trimmed of surrounding whitespace and empty fragments
    dropped; trailing text without a delimiter becomes the last sentence.
    """
    sentences: list[str] = []
    current: list[str] = []
    for char in text:
        current.append(char)
        if char in delimiters:
            fragment = "".join(current).strip()
            if fragment:
                sentences.append(fragment)
            current = []
    tail = "".join(current).strip()
    if tail:
        sentences.append(tail)
    return sentences


def compute_delay(sentence: str, policy: AgentPolicy) -> float:
    """Seconds to wait before sending: factor times the character count."""
    if not sentence:
        raise ValueError("sentence must be non-empty")
    return policy.delay_seconds_per_char * len(sentence)


def generate_response(
    history: list[ChatMessage],
    kb: KnowledgeBase,
    policy: AgentPolicy,
    username: str,
    backend,
    *,
    model_name: str = "scripted",
) -> str | None:
    """One reply spoken as ``username``, or None when the model skips.

    The raw completion is trimmed, a single ``username:`` prefix stripped if
    the model echoed the requested format, and the SKIP sentinel (exact
    token) mapped to None so it can never be dispatched as chat text.
    """
    variables = {
        "username": username,
        "taskList": build_task_list(kb),
        "userChatHistory": serialize_history(history, policy.max_history_messages),
    }
    system_text, user_text = render(policy.conversation_template, variables)
    response = backend.complete(
        CompletionRequest(
            system_text=system_text,
            user_text=user_text,
            model_name=model_name,
            temperature=CONVERSATION_TEMPERATURE,
        )
    )
    text = strip_name_prefix(response.text.strip(), username)
    if not text or text == SKIP_SENTINEL:
        return None
    return text


def on_new_input(queue: OutboundQueue, trigger: Trigger) -> GenerationRequest:
    """Clear the queue, advance the batch sequence, request one regeneration."""
    queue.pending.clear()
    queue.generation_seq += 1
    return GenerationRequest(
        environment=queue.environment,
        generation_seq=queue.generation_seq,
        trigger=trigger,
    )


def enqueue_batch(
    queue: OutboundQueue,
    request: GenerationRequest,
    sentences: list[str],
    policy: AgentPolicy,
    now_ms: int,
) -> list[ScheduledMessage]:
    """Schedule a batch: sentence k is due after the cumulative delay of 1..k.

    A batch whose generation sequence is older than the queue's was obsoleted
    by a later clear; it is dropped silently into ``dropped_batches`` and
    nothing is enqueued.
    """
    if request.generation_seq != queue.generation_seq:
        queue.dropped_batches += 1
        return []
    due = now_ms
    scheduled: list[ScheduledMessage] = []
    for sentence in sentences:
        # max(1 ms) keeps due times strictly increasing even for tiny factors
        due += max(1, round(compute_delay(sentence, policy) * 1000))
        scheduled.append(
            ScheduledMessage(
                environment=queue.environment,
                text=sentence,
                due_at=due,
                generation_seq=request.generation_seq,
            )
        )
    queue.pending.extend(scheduled)
    return scheduled


def dispatch_due(
    queue: OutboundQueue,
    now_ms: int,
    *,
    session_id: SessionId,
    author: Author,
    ids: IdFactory,
) -> list[ChatMessage]:
    """Pop every message due by ``now_ms`` as agent-authored chat messages.

    Dispatched messages are stamped with their due time, not the poll time,
    so timestamps are independent of how often the queue is polled.
    """
    dispatched: list[ChatMessage] = []
    while queue.pending and queue.pending[0].due_at <= now_ms:
        scheduled = queue.pending.pop(0)
        message_id: MessageId = ids.new_id("message")
        dispatched.append(
            ChatMessage(
                id=message_id,
                session=session_id,
                environment=scheduled.environment,
                author=author,
                text=scheduled.text,
                sent_at=scheduled.due_at,
            )
        )
    return dispatched
