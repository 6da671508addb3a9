"""Shared domain types: sessions, messages, transferred info items, agent policies.

A session is a dyad of two isolated environments. Each environment holds one
human and one agent; the agent is the proxy of the *other* participant and
carries that participant's display name. Humans never see the peer
environment directly — the only objects that cross between environments are
``InfoItem`` records moved by the orchestrator.
"""

from __future__ import annotations

import re
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

# Opaque identifiers (UUID-format text).
SessionId = str
UserId = str
AgentId = str
MessageId = str
InfoItemId = str

ALLOWED_PLACEHOLDERS = frozenset(
    {"username", "taskList", "userChatHistory", "chatContext", "eventContent", "currentDate"}
)

DEFAULT_DELAY_SECONDS_PER_CHAR = 2.5
DEFAULT_SENTENCE_DELIMITERS = frozenset({"。", "！", "？", ".", "!", "?"})
DEFAULT_MAX_HISTORY_MESSAGES = 50

_PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class DomainError(Exception):
    """Base class for domain validation failures."""


class DuplicateParticipant(DomainError):
    """The two participants of a session must be distinct users."""


class MissingVariable(DomainError):
    """A template placeholder has no binding in the variable map."""

    def __init__(self, name: str) -> None:
        super().__init__(f"no binding for placeholder ${{{name}}}")
        self.name = name


class IdFactory:
    """Produces UUID-format identifiers.

    The default factory is random (uuid4). ``deterministic`` builds one whose
    output depends only on the label and an internal counter, so simulation
    runs are byte-identical.
    """

    def new_id(self, label: str) -> str:
        return str(uuid.uuid4())

    @staticmethod
    def deterministic(namespace: str = "dyadchat") -> "IdFactory":
        return _DeterministicIdFactory(namespace)


class _DeterministicIdFactory(IdFactory):
    def __init__(self, namespace: str) -> None:
        self._namespace = namespace
        self._counter = 0

    def new_id(self, label: str) -> str:
        self._counter += 1
        return str(uuid.uuid5(uuid.NAMESPACE_URL, f"{self._namespace}/{label}/{self._counter}"))


class AuthorKind(Enum):
    HUMAN = "human"
    AGENT = "agent"


@dataclass(frozen=True)
class Author:
    kind: AuthorKind
    display_name: str

    def __post_init__(self) -> None:
        if not self.display_name:
            raise DomainError("author display_name must be non-empty")


@dataclass(frozen=True)
class ChatMessage:
    """One utterance inside one environment."""

    id: MessageId
    session: SessionId
    environment: UserId
    author: Author
    text: str
    sent_at: int  # milliseconds since epoch

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DomainError("message text must be non-empty after trimming")


class InfoItemStatus(Enum):
    PENDING = "pending"
    DELIVERED = "delivered"


@dataclass
class InfoItem:
    """A unit of extracted information in transit between agents.

    ``content`` is a third-person description of what happened in the source
    environment. Status only ever moves pending -> delivered.
    """

    id: InfoItemId
    session: SessionId
    source_env: UserId
    target_env: UserId
    content: str
    created_at: int
    status: InfoItemStatus = InfoItemStatus.PENDING

    def __post_init__(self) -> None:
        if self.source_env == self.target_env:
            raise DomainError("info item source and target environments must differ")
        if not self.content.strip():
            raise DomainError("info item content must be non-empty")
        if self.content == "NONE":
            raise DomainError('info item content must not be the sentinel "NONE"')

    def mark_delivered(self) -> None:
        self.status = InfoItemStatus.DELIVERED

    @property
    def pending(self) -> bool:
        return self.status is InfoItemStatus.PENDING


@dataclass
class KnowledgeBase:
    """Info items an agent has received, in arrival order."""

    owner_agent: AgentId
    owner_env: UserId
    items: list[InfoItem] = field(default_factory=list)

    def append(self, item: InfoItem) -> None:
        if item.target_env != self.owner_env:
            raise DomainError(
                f"item targets environment {item.target_env}, knowledge base belongs to {self.owner_env}"
            )
        if any(existing.id == item.id for existing in self.items):
            raise DomainError(f"duplicate info item id {item.id}")
        self.items.append(item)

    def pending_items(self) -> list[InfoItem]:
        return [item for item in self.items if item.pending]

    def find(self, item_id: InfoItemId) -> InfoItem | None:
        for item in self.items:
            if item.id == item_id:
                return item
        return None


def find_placeholders(text: str) -> set[str]:
    """Names of all ``${name}`` placeholders appearing in ``text``."""
    return set(_PLACEHOLDER_RE.findall(text))


@dataclass(frozen=True)
class PromptTemplate:
    """A system/user prompt pair with ``${name}`` placeholders.

    Substitution is single-pass and literal: substituted text is never
    re-scanned, so user-supplied content containing ``${...}`` cannot inject
    further expansion.
    """

    system_text: str
    user_text: str

    def __post_init__(self) -> None:
        unknown = self.placeholders() - ALLOWED_PLACEHOLDERS
        if unknown:
            raise DomainError(f"unknown placeholders: {sorted(unknown)}")

    def placeholders(self) -> set[str]:
        return find_placeholders(self.system_text) | find_placeholders(self.user_text)


def render(template: PromptTemplate, variables: dict[str, str]) -> tuple[str, str]:
    """Substitute every placeholder in the template, literally and once.

    Raises MissingVariable if a placeholder has no binding. Extra variables
    are ignored.
    """

    def substitute(text: str) -> str:
        def replace(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in variables:
                raise MissingVariable(name)
            return variables[name]

        return _PLACEHOLDER_RE.sub(replace, text)

    return substitute(template.system_text), substitute(template.user_text)


@dataclass(frozen=True)
class AgentPolicy:
    """Goal-directed agent configuration.

    The three templates drive the agent's pipeline stages: what to extract
    from the local conversation, how to check a transferred item surfaced,
    and how to speak to the local human. Timing parameters feed the outgoing
    message scheduler.
    """

    name: str
    extraction_template: PromptTemplate
    validation_template: PromptTemplate
    conversation_template: PromptTemplate
    delay_seconds_per_char: float = DEFAULT_DELAY_SECONDS_PER_CHAR
    sentence_delimiters: frozenset[str] = DEFAULT_SENTENCE_DELIMITERS
    max_history_messages: int = DEFAULT_MAX_HISTORY_MESSAGES

    def __post_init__(self) -> None:
        if self.delay_seconds_per_char <= 0:
            raise DomainError("delay_seconds_per_char must be positive")
        if not self.sentence_delimiters:
            raise DomainError("sentence_delimiters must be non-empty")
        if self.max_history_messages <= 0:
            raise DomainError("max_history_messages must be positive")


@dataclass(frozen=True)
class Participant:
    user_id: UserId
    display_name: str

    def __post_init__(self) -> None:
        if not self.display_name.strip():
            raise DomainError("participant display_name must be non-empty")


@dataclass
class AgentRecord:
    """The agent living in one environment: identity, policy, received items."""

    agent_id: AgentId
    display_name: str  # the peer's name: the agent is the peer's proxy
    policy: AgentPolicy
    knowledge_base: KnowledgeBase

    def author(self) -> Author:
        return Author(kind=AuthorKind.AGENT, display_name=self.display_name)


@dataclass(frozen=True)
class SessionConfig:
    """Inputs to new_session: two participants and one policy per environment.

    ``policies[i]`` configures the agent living in ``participants[i]``'s
    environment.
    """

    participants: tuple[Participant, Participant]
    policies: tuple[AgentPolicy, AgentPolicy]


@dataclass
class Session:
    """A dyad: two environments, two agents, one shared identity."""

    id: SessionId
    participants: tuple[Participant, Participant]
    envs: dict[UserId, list[ChatMessage]]
    agents: dict[UserId, AgentRecord]
    created_at: int

    def peer_of(self, env: UserId) -> Participant:
        for participant in self.participants:
            if participant.user_id != env:
                return participant
        raise KeyError(f"unknown environment {env}")

    def participant(self, env: UserId) -> Participant:
        for participant in self.participants:
            if participant.user_id == env:
                return participant
        raise KeyError(f"unknown environment {env}")

    def append_message(self, message: ChatMessage) -> None:
        if message.session != self.id:
            raise DomainError("message belongs to a different session")
        log = self.envs[message.environment]
        if log and message.sent_at < log[-1].sent_at:
            raise DomainError(
                f"sent_at must be non-decreasing within an environment log "
                f"({message.sent_at} < {log[-1].sent_at})"
            )
        log.append(message)

    def human_author(self, env: UserId) -> Author:
        return Author(kind=AuthorKind.HUMAN, display_name=self.participant(env).display_name)


def new_session(
    config: SessionConfig,
    *,
    ids: IdFactory | None = None,
    now_ms: int = 0,
    session_id: SessionId | None = None,
) -> Session:
    """Create a session with empty logs and cross-assigned agent names.

    The agent placed in participant X's environment is the proxy of the other
    participant and is displayed under that participant's name.
    """
    ids = ids or IdFactory()
    first, second = config.participants
    if first.user_id == second.user_id:
        raise DuplicateParticipant(f"participants must be distinct users, got {first.user_id!r} twice")

    session_id = session_id or ids.new_id("session")
    agents: dict[UserId, AgentRecord] = {}
    for me, peer, policy in (
        (first, second, config.policies[0]),
        (second, first, config.policies[1]),
    ):
        agent_id = ids.new_id("agent")
        agents[me.user_id] = AgentRecord(
            agent_id=agent_id,
            display_name=peer.display_name,
            policy=policy,
            knowledge_base=KnowledgeBase(owner_agent=agent_id, owner_env=me.user_id),
        )

    return Session(
        id=session_id,
        participants=(first, second),
        envs={first.user_id: [], second.user_id: []},
        agents=agents,
        created_at=now_ms,
    )


def serialize_history(messages: Iterable[ChatMessage], limit: int) -> str:
    """Most recent ``limit`` messages as chronological ``Name: text`` lines."""
    window = list(messages)[-limit:]
    return "\n".join(f"{m.author.display_name}: {m.text}" for m in window)
