"""Information extraction from a local conversation, and delivery validation.

Extraction runs once per human utterance: the agent distills what the human
said into a third-person description destined for the peer agent. The
sentinel ``NONE`` (exact token, compared after trimming) means nothing worth
transferring. Validation later checks, against the target environment's log,
whether a transferred item has actually surfaced in conversation; its verdict
sentinels ``true``/``false`` are matched case-insensitively because
generation models vary capitalization of plain words.
"""

from __future__ import annotations

from datetime import datetime, timezone

from .domain import (
    AgentPolicy,
    AuthorKind,
    ChatMessage,
    DomainError,
    IdFactory,
    InfoItem,
    UserId,
    render,
    serialize_history,
)
from .gateway import (
    EXTRACTION_TEMPERATURE,
    CompletionRequest,
    CompletionResponse,
)

NONE_SENTINEL = "NONE"


class EmptyLog(DomainError):
    """Extraction needs at least one message to look at."""


class UnparsableVerdict(DomainError):
    """The validation response was neither "true" nor "false"."""

    def __init__(self, text: str) -> None:
        super().__init__(f"validation verdict is neither true nor false: {text!r}")
        self.text = text


def build_extraction_vars(log: list[ChatMessage], policy: AgentPolicy, *, now_ms: int = 0) -> dict[str, str]:
    """Variable map for the extraction template.

    The most recent ``max_history_messages`` messages are serialized as
    chronological ``Name: text`` lines and bound to both history placeholders;
    the current date is provided for templates that want to resolve relative
    dates, but no shipped template is required to use it.
    """
    if not log:
        raise EmptyLog("cannot extract from an empty conversation")
    history = serialize_history(log, policy.max_history_messages)
    current_date = datetime.fromtimestamp(now_ms / 1000.0, tz=timezone.utc).strftime("%Y-%m-%d")
    return {
        "userChatHistory": history,
        "chatContext": history,
        "currentDate": current_date,
    }


def extract(
    log: list[ChatMessage],
    policy: AgentPolicy,
    backend,
    *,
    source_env: UserId,
    target_env: UserId,
    ids: IdFactory,
    now_ms: int,
    model_name: str = "scripted",
) -> InfoItem | None:
    """Distill the latest human utterance into an InfoItem, or nothing.

    Any non-sentinel response text is accepted verbatim (trimmed) as the item
    content; there is no malformed-response case.
    """
    if not log:
        raise EmptyLog("cannot extract from an empty conversation")
    if log[-1].author.kind is not AuthorKind.HUMAN:
        raise DomainError("extraction triggers only on human utterances")

    variables = build_extraction_vars(log, policy, now_ms=now_ms)
    system_text, user_text = render(policy.extraction_template, variables)
    response: CompletionResponse = backend.complete(
        CompletionRequest(
            system_text=system_text,
            user_text=user_text,
            model_name=model_name,
            temperature=EXTRACTION_TEMPERATURE,
        )
    )
    content = response.text.strip()
    if content == NONE_SENTINEL:
        return None
    return InfoItem(
        id=ids.new_id("item"),
        session=log[-1].session,
        source_env=source_env,
        target_env=target_env,
        content=content,
        created_at=now_ms,
    )


def check_delivered(
    log: list[ChatMessage],
    item: InfoItem,
    policy: AgentPolicy,
    backend,
    *,
    model_name: str = "scripted",
) -> bool:
    """Ask the backend whether ``item`` has surfaced in the target log.

    Pure with respect to the log and the item; only the orchestrator flips
    item status. Raises UnparsableVerdict on any response other than
    true/false (after trim and lowercase).
    """
    history = serialize_history(log, policy.max_history_messages)
    system_text, user_text = render(
        policy.validation_template,
        {"chatContext": history, "eventContent": item.content},
    )
    response = backend.complete(
        CompletionRequest(
            system_text=system_text,
            user_text=user_text,
            model_name=model_name,
            temperature=EXTRACTION_TEMPERATURE,
        )
    )
    verdict = response.text.strip().lower()
    if verdict == "true":
        return True
    if verdict == "false":
        return False
    raise UnparsableVerdict(response.text)
