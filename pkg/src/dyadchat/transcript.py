"""Append-only JSON-lines transcripts: the event stream every session emits.

One orchestrator event per line. The transcript doubles as persistence:
``restore_transcript`` replays message/dispatch/transfer/validation events to
rebuild logs, knowledge bases, and pending item statuses. In-flight outgoing
queues are deliberately not persisted — they regenerate on the next event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, IO

from .domain import (
    AgentRecord,
    Author,
    AuthorKind,
    ChatMessage,
    InfoItem,
    InfoItemStatus,
    KnowledgeBase,
    Participant,
    Session,
)
from .presets import policy_from_dict, policy_to_dict

EventSink = Callable[[dict[str, Any]], None]


class CorruptTranscript(Exception):
    """A non-tail line failed to parse or violates the event schema."""

    def __init__(self, line_no: int, detail: str) -> None:
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


def dump_event(event: dict[str, Any]) -> str:
    return json.dumps(event, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def message_to_dict(message: ChatMessage) -> dict[str, Any]:
    return {
        "id": message.id,
        "author_kind": message.author.kind.value,
        "display_name": message.author.display_name,
        "text": message.text,
        "sent_at": message.sent_at,
    }


def message_from_dict(data: dict[str, Any], *, session_id: str, environment: str) -> ChatMessage:
    return ChatMessage(
        id=data["id"],
        session=session_id,
        environment=environment,
        author=Author(kind=AuthorKind(data["author_kind"]), display_name=data["display_name"]),
        text=data["text"],
        sent_at=data["sent_at"],
    )


def item_to_dict(item: InfoItem) -> dict[str, Any]:
    return {
        "id": item.id,
        "source_env": item.source_env,
        "target_env": item.target_env,
        "content": item.content,
        "created_at": item.created_at,
        "status": item.status.value,
    }


def item_from_dict(data: dict[str, Any], *, session_id: str) -> InfoItem:
    return InfoItem(
        id=data["id"],
        session=session_id,
        source_env=data["source_env"],
        target_env=data["target_env"],
        content=data["content"],
        created_at=data["created_at"],
        status=InfoItemStatus(data["status"]),
    )


def session_header(session: Session, *, join_tokens: dict[str, str] | None = None) -> dict[str, Any]:
    """The first transcript line: everything needed to rebuild the session."""
    header: dict[str, Any] = {
        "at": session.created_at,
        "type": "session",
        "session_id": session.id,
        "created_at": session.created_at,
        "participants": [
            {"user_id": p.user_id, "display_name": p.display_name} for p in session.participants
        ],
        "agents": {
            env: {
                "agent_id": record.agent_id,
                "display_name": record.display_name,
                "policy": policy_to_dict(record.policy),
            }
            for env, record in session.agents.items()
        },
    }
    if join_tokens is not None:
        header["join_tokens"] = join_tokens
    return header


class TranscriptWriter:
    """Serializes events to a line-buffered JSONL stream."""

    def __init__(self, stream: IO[str]) -> None:
        self._stream = stream

    def __call__(self, event: dict[str, Any]) -> None:
        self._stream.write(dump_event(event) + "\n")
        self._stream.flush()


@dataclass
class RestoredState:
    session: Session
    join_tokens: dict[str, str] | None = None
    warnings: list[str] = field(default_factory=list)


def _session_from_header(header: dict[str, Any]) -> Session:
    participants = tuple(
        Participant(user_id=p["user_id"], display_name=p["display_name"])
        for p in header["participants"]
    )
    if len(participants) != 2:
        raise ValueError(f"expected 2 participants, got {len(participants)}")
    agents: dict[str, AgentRecord] = {}
    for env, raw in header["agents"].items():
        agent_id = raw["agent_id"]
        agents[env] = AgentRecord(
            agent_id=agent_id,
            display_name=raw["display_name"],
            policy=policy_from_dict(raw["policy"]),
            knowledge_base=KnowledgeBase(owner_agent=agent_id, owner_env=env),
        )
    return Session(
        id=header["session_id"],
        participants=(participants[0], participants[1]),
        envs={p.user_id: [] for p in participants},
        agents=agents,
        created_at=header["created_at"],
    )


def _apply_event(session: Session, event: dict[str, Any]) -> None:
    kind = event["type"]
    if kind == "message":
        session.append_message(
            message_from_dict(event["message"], session_id=session.id, environment=event["env"])
        )
    elif kind == "dispatch":
        for raw in event["messages"]:
            session.append_message(
                message_from_dict(raw, session_id=session.id, environment=event["env"])
            )
    elif kind == "transfer":
        item = item_from_dict(event["item"], session_id=session.id)
        session.agents[item.target_env].knowledge_base.append(item)
    elif kind == "validation":
        if event["status"] == InfoItemStatus.DELIVERED.value:
            item = session.agents[event["env"]].knowledge_base.find(event["item_id"])
            if item is None:
                raise ValueError(f"validation references unknown item {event['item_id']}")
            item.mark_delivered()
    # extraction / generation / error events carry no restorable state:
    # extracted items materialize at transfer, queues are rebuilt live.


def restore_events(lines: list[str], *, source: str = "<transcript>") -> RestoredState:
    """Rebuild session state from transcript lines.

    A torn final line (crash mid-append) is tolerated with a warning; any
    earlier malformed line raises CorruptTranscript with its line number.
    """
    events: list[dict[str, Any]] = []
    warnings: list[str] = []
    last_index = len(lines) - 1
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            event = json.loads(line)
            if not isinstance(event, dict) or "type" not in event:
                raise ValueError("event must be an object with a 'type' field")
        except ValueError as exc:
            if index == last_index:
                warnings.append(
                    f"{source}: discarded truncated final line {index + 1} ({exc})"
                )
                break
            raise CorruptTranscript(index + 1, str(exc)) from exc
        events.append(event)

    if not events or events[0]["type"] != "session":
        raise CorruptTranscript(1, "transcript must start with a session header")

    session = _session_from_header(events[0])
    for offset, event in enumerate(events[1:], start=2):
        try:
            _apply_event(session, event)
        except (KeyError, ValueError) as exc:
            raise CorruptTranscript(offset, f"cannot apply {event.get('type')} event: {exc}") from exc

    return RestoredState(
        session=session,
        join_tokens=events[0].get("join_tokens"),
        warnings=warnings,
    )


def restore_transcript(path: str | Path) -> RestoredState:
    text = Path(path).read_text(encoding="utf-8")
    # split keeps a trailing '' after a final newline; drop it so the last
    # *real* line is the torn-write candidate
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return restore_events(lines, source=str(path))
