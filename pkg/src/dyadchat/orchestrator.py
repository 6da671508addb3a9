"""Per-session pipeline wiring.

Routes each human message through extraction, moves resulting info items to
the peer agent (outer loop), regenerates the local agent's reply (inner
loop), and validates pending items after every agent dispatch. All effects of
one session are applied strictly serially: the runtime itself is not
thread-safe and expects its caller (simulator loop or service actor) to feed
it one event at a time.

Every effect is mirrored as a structured transcript event handed to the
configured sink; see transcript.py for the line format.
"""

from __future__ import annotations

from typing import Any, Callable

from .clock import Clock
from .domain import ChatMessage, IdFactory, InfoItem, Session, UserId
from .engine import (
    GenerationRequest,
    OutboundQueue,
    Trigger,
    dispatch_due,
    enqueue_batch,
    generate_response,
    on_new_input,
    split_sentences,
)
from .extraction import UnparsableVerdict, check_delivered, extract
from .gateway import GatewayError
from .transcript import item_to_dict, message_to_dict, session_header


class SessionRuntime:
    """Owns one session's state machine and its transcript stream."""

    def __init__(
        self,
        session: Session,
        backend,
        *,
        clock: Clock,
        ids: IdFactory,
        sink: Callable[[dict[str, Any]], None] | None = None,
        model_name: str = "scripted",
        emit_header: bool = True,
        join_tokens: dict[str, str] | None = None,
    ) -> None:
        self.session = session
        self.backend = backend
        self.clock = clock
        self.ids = ids
        self.model_name = model_name
        self.gateway_error_count = 0
        self._sinks: list[Callable[[dict[str, Any]], None]] = [sink] if sink else []
        self.queues: dict[UserId, OutboundQueue] = {
            p.user_id: OutboundQueue(environment=p.user_id) for p in session.participants
        }
        if emit_header:
            self._emit(session_header(session, join_tokens=join_tokens))

    def add_sink(self, sink: Callable[[dict[str, Any]], None]) -> None:
        self._sinks.append(sink)

    def _emit(self, event: dict[str, Any]) -> None:
        for sink in self._sinks:
            sink(event)

    def _event(self, kind: str, **fields: Any) -> None:
        self._emit({"at": self.clock.now_ms(), "type": kind, **fields})

    # ------------------------------------------------------------------ events

    def on_human_message(self, env: UserId, text: str) -> ChatMessage:
        """Append a human utterance and run the full local pipeline.

        Extraction failures degrade gracefully: the item (if any) is lost but
        the local regeneration still fires, so the inner loop stays alive.
        """
        now = self.clock.now_ms()
        message = ChatMessage(
            id=self.ids.new_id("message"),
            session=self.session.id,
            environment=env,
            author=self.session.human_author(env),
            text=text,
            sent_at=now,
        )
        self.session.append_message(message)
        self._event("message", env=env, message=message_to_dict(message))

        agent = self.session.agents[env]
        peer = self.session.peer_of(env)
        item: InfoItem | None = None
        try:
            item = extract(
                self.session.envs[env],
                agent.policy,
                self.backend,
                source_env=env,
                target_env=peer.user_id,
                ids=self.ids,
                now_ms=now,
                model_name=self.model_name,
            )
        except GatewayError as exc:
            self.gateway_error_count += 1
            self._event("error", env=env, code="gateway_error", where="extraction", detail=str(exc))
        else:
            self._event(
                "extraction",
                env=env,
                outcome="item" if item else "none",
                item=item_to_dict(item) if item else None,
            )

        if item is not None:
            self.transfer(item)
        self._regenerate(on_new_input(self.queues[env], Trigger.HUMAN_MESSAGE))
        return message

    def transfer(self, item: InfoItem) -> None:
        """Move a pending item into the target agent's knowledge base.

        A one-way send: the target environment's queue is cleared and its
        agent regenerates with the updated task list.
        """
        assert item.pending, "only pending items can be transferred"
        assert item.target_env in self.session.agents, f"unknown target {item.target_env}"
        self.session.agents[item.target_env].knowledge_base.append(item)
        self._event("transfer", env=item.target_env, item=item_to_dict(item))
        self._regenerate(on_new_input(self.queues[item.target_env], Trigger.INFO_ITEM_ARRIVAL))

    def _regenerate(self, request: GenerationRequest) -> None:
        env = request.environment
        agent = self.session.agents[env]
        try:
            reply = generate_response(
                self.session.envs[env],
                agent.knowledge_base,
                agent.policy,
                agent.display_name,
                self.backend,
                model_name=self.model_name,
            )
        except GatewayError as exc:
            self.gateway_error_count += 1
            self._event("error", env=env, code="gateway_error", where="generation", detail=str(exc))
            return

        if reply is None:
            self._event(
                "generation",
                env=env,
                trigger=request.trigger.value,
                outcome="skip",
                generation_seq=request.generation_seq,
                scheduled=[],
            )
            return

        sentences = split_sentences(reply, agent.policy.sentence_delimiters)
        scheduled = enqueue_batch(
            self.queues[env], request, sentences, agent.policy, self.clock.now_ms()
        )
        if not scheduled:
            self._event(
                "error",
                env=env,
                code="stale_batch",
                detail=f"batch seq {request.generation_seq} behind queue seq "
                f"{self.queues[env].generation_seq}",
            )
            return
        self._event(
            "generation",
            env=env,
            trigger=request.trigger.value,
            outcome="reply",
            generation_seq=request.generation_seq,
            scheduled=[{"text": s.text, "due_at": s.due_at} for s in scheduled],
        )

    def dispatch_ready(self, now_ms: int) -> list[ChatMessage]:
        """Dispatch every due sentence across both environments."""
        dispatched: list[ChatMessage] = []
        for participant in self.session.participants:
            env = participant.user_id
            messages = dispatch_due(
                self.queues[env],
                now_ms,
                session_id=self.session.id,
                author=self.session.agents[env].author(),
                ids=self.ids,
            )
            if messages:
                self.on_agent_dispatch(env, messages)
                dispatched.extend(messages)
        return dispatched

    def on_agent_dispatch(self, env: UserId, messages: list[ChatMessage]) -> None:
        """Append dispatched agent messages, then validate pending items once."""
        if not messages:
            return
        for message in messages:
            self.session.append_message(message)
        self._event(
            "dispatch",
            env=env,
            generation_seq=self.queues[env].generation_seq,
            messages=[message_to_dict(m) for m in messages],
        )
        self.run_validation_pass(env)

    def run_validation_pass(self, env: UserId) -> None:
        """Check each pending item targeting ``env`` in arrival order.

        Only a clean "true" verdict flips an item to delivered; gateway
        errors and unparsable verdicts leave it pending for the next pass.
        """
        agent = self.session.agents[env]
        for item in agent.knowledge_base.pending_items():
            try:
                delivered = check_delivered(
                    self.session.envs[env],
                    item,
                    agent.policy,
                    self.backend,
                    model_name=self.model_name,
                )
            except UnparsableVerdict as exc:
                self._event(
                    "validation",
                    env=env,
                    item_id=item.id,
                    verdict="unparsable",
                    status=item.status.value,
                    detail=exc.text,
                )
                continue
            except GatewayError as exc:
                self.gateway_error_count += 1
                self._event(
                    "error", env=env, code="gateway_error", where="validation", detail=str(exc)
                )
                continue
            if delivered:
                item.mark_delivered()
            self._event(
                "validation",
                env=env,
                item_id=item.id,
                verdict="true" if delivered else "false",
                status=item.status.value,
            )

    # ------------------------------------------------------------------ timing

    def next_due_ms(self) -> int | None:
        """Earliest scheduled send across both environments, if any."""
        dues = [q.next_due_ms() for q in self.queues.values()]
        dues = [d for d in dues if d is not None]
        return min(dues) if dues else None

    def dropped_batches(self) -> int:
        return sum(q.dropped_batches for q in self.queues.values())
