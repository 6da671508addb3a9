"""Network-facing chat service.

HTTP/JSON for session creation, WebSocket for the live event stream. Each
session runs as a single actor task: every command (join, send, history) and
every due-time dispatch goes through one queue, so a session's effects apply
strictly in arrival order no matter how many clients are connected. Clients
only ever see their own environment's messages.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, field_validator

from .clock import ScaledClock
from .domain import (
    ChatMessage,
    DomainError,
    IdFactory,
    Participant,
    SessionConfig,
    UserId,
    new_session,
)
from .gateway import HttpBackend, load_script
from .orchestrator import SessionRuntime
from .presets import UnknownPreset, load_policy_pair
from .transcript import TranscriptWriter, message_to_dict, restore_transcript

logger = logging.getLogger(__name__)

# WebSocket close codes (4000-range = application-defined)
WS_INVALID_TOKEN = 4401
WS_ALREADY_JOINED = 4403


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8700
    script: Path | None = None
    base_url: str | None = None
    model_name: str = "gpt-4o"
    timeout_seconds: float = 30.0
    preset_dir: Path | None = None
    transcript_dir: Path | None = None
    time_scale: float = 1.0

    @classmethod
    def load(cls, config_path: Path | None = None, **overrides: Any) -> "ServiceConfig":
        """Config file first, CLI flags on top."""
        values: dict[str, Any] = {}
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise ValueError("config file must hold a JSON object")
            unknown = set(raw) - {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            values.update(raw)
        renames = {"model": "model_name"}
        for key, value in overrides.items():
            if value is not None:
                values[renames.get(key, key)] = value
        for path_key in ("script", "preset_dir", "transcript_dir"):
            if values.get(path_key) is not None:
                values[path_key] = Path(values[path_key])
        config = cls(**values)
        if config.script is None and config.base_url is None:
            raise ValueError("configure either a scripted gateway (script) or a live one (base_url)")
        return config

    def build_backend(self):
        if self.script is not None:
            return load_script(self.script)
        assert self.base_url is not None
        return HttpBackend(self.base_url, timeout_seconds=self.timeout_seconds)


class CreateSessionRequest(BaseModel):
    participants: list[str]
    policy_preset: str = "first-time"

    @field_validator("participants")
    @classmethod
    def _two_nonempty_names(cls, value: list[str]) -> list[str]:
        if len(value) != 2:
            raise ValueError("exactly two participants required")
        names = [name.strip() for name in value]
        if any(not name for name in names):
            raise ValueError("participant names must be non-empty")
        return names


@dataclass
class ClientConnection:
    env: UserId
    token: str
    outbox: asyncio.Queue = field(default_factory=asyncio.Queue)

    def push(self, event: dict[str, Any]) -> None:
        self.outbox.put_nowait(event)


@dataclass
class _Join:
    connection: ClientConnection
    after_id: str | None


@dataclass
class _Send:
    connection: ClientConnection
    text: str
    correlation_id: str | None


@dataclass
class _History:
    connection: ClientConnection
    after_id: str | None


class SessionActor:
    """One task per session; the sole writer of that session's state."""

    def __init__(self, runtime: SessionRuntime, clock: ScaledClock, tokens: dict[str, UserId]) -> None:
        self.runtime = runtime
        self.clock = clock
        self.tokens = tokens  # join token -> environment
        self.active_tokens: set[str] = set()
        self.connections: dict[UserId, list[ClientConnection]] = {
            env: [] for env in runtime.session.envs
        }
        self.commands: asyncio.Queue = asyncio.Queue()
        self._task: asyncio.Task | None = None

    @property
    def session_id(self) -> str:
        return self.runtime.session.id

    def start(self) -> None:
        self._task = asyncio.create_task(self._loop(), name=f"session-{self.session_id}")

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._task

    async def _loop(self) -> None:
        while True:
            due = self.runtime.next_due_ms()
            timeout = None if due is None else max(0.0, self.clock.wall_seconds_until(due))
            command = None
            try:
                command = await asyncio.wait_for(self.commands.get(), timeout)
            except asyncio.TimeoutError:
                pass
            # Send anything already due before applying the new command: the
            # scheduler's contract is continuous queue checking.
            dispatched = await asyncio.to_thread(self.runtime.dispatch_ready, self.clock.now_ms())
            for message in dispatched:
                self._fanout(message)
            if command is not None:
                await self._handle(command)

    async def _handle(self, command: Any) -> None:
        if isinstance(command, _Join):
            self._push_history(command.connection, command.after_id)
            self.connections[command.connection.env].append(command.connection)
        elif isinstance(command, _Send):
            try:
                message = await asyncio.to_thread(
                    self.runtime.on_human_message, command.connection.env, command.text
                )
            except DomainError as exc:
                command.connection.push(
                    {"type": "error", "code": "invalid_message", "detail": str(exc)}
                )
                return
            self._fanout(message, origin=command.connection, correlation_id=command.correlation_id)
        elif isinstance(command, _History):
            self._push_history(command.connection, command.after_id)

    def _server_event(self, message: ChatMessage) -> dict[str, Any]:
        return {"type": "message", **message_to_dict(message)}

    def _push_history(self, connection: ClientConnection, after_id: str | None) -> None:
        log = self.runtime.session.envs[connection.env]
        start = 0
        if after_id is not None:
            for i, message in enumerate(log):
                if message.id == after_id:
                    start = i + 1
                    break
        connection.push(
            {"type": "history", "messages": [message_to_dict(m) for m in log[start:]]}
        )

    def _fanout(
        self,
        message: ChatMessage,
        *,
        origin: ClientConnection | None = None,
        correlation_id: str | None = None,
    ) -> None:
        for connection in self.connections[message.environment]:
            event = self._server_event(message)
            if connection is origin and correlation_id is not None:
                event["correlation_id"] = correlation_id
            connection.push(event)

    def remove_connection(self, connection: ClientConnection) -> None:
        self.active_tokens.discard(connection.token)
        with contextlib.suppress(ValueError):
            self.connections[connection.env].remove(connection)


class ChatService:
    """Session registry plus the shared gateway, clock, and persistence."""

    def __init__(self, config: ServiceConfig, backend=None) -> None:
        self.config = config
        self.backend = backend if backend is not None else config.build_backend()
        self.clock = ScaledClock(scale=config.time_scale)
        self.ids = IdFactory()
        self.sessions: dict[str, SessionActor] = {}
        self._transcript_files: list[IO[str]] = []

    def _transcript_sink(self, session_id: str):
        if self.config.transcript_dir is None:
            return None
        self.config.transcript_dir.mkdir(parents=True, exist_ok=True)
        stream = (self.config.transcript_dir / f"{session_id}.jsonl").open("a", encoding="utf-8")
        self._transcript_files.append(stream)
        return TranscriptWriter(stream)

    def create_session(self, request: CreateSessionRequest) -> dict[str, Any]:
        try:
            policies = load_policy_pair(request.policy_preset, self.config.preset_dir)
        except UnknownPreset as exc:
            raise HTTPException(status_code=400, detail={"code": "unknown_preset", "detail": str(exc)})
        config = SessionConfig(
            participants=(
                Participant(user_id=self.ids.new_id("user"), display_name=request.participants[0]),
                Participant(user_id=self.ids.new_id("user"), display_name=request.participants[1]),
            ),
            policies=policies,
        )
        session = new_session(config, ids=self.ids, now_ms=self.clock.now_ms())
        tokens = {secrets.token_urlsafe(16): p.user_id for p in session.participants}
        runtime = SessionRuntime(
            session,
            self.backend,
            clock=self.clock,
            ids=self.ids,
            sink=self._transcript_sink(session.id),
            model_name=self.config.model_name,
            join_tokens=tokens,
        )
        actor = SessionActor(runtime, self.clock, tokens)
        self.sessions[session.id] = actor
        actor.start()
        return {"session_id": session.id, "join_tokens": list(tokens)}

    def restore_sessions(self) -> None:
        """Rebuild actors from transcripts left by a previous process."""
        directory = self.config.transcript_dir
        if directory is None or not directory.is_dir():
            return
        for path in sorted(directory.glob("*.jsonl")):
            try:
                restored = restore_transcript(path)
            except Exception as exc:  # noqa: BLE001 - one bad file must not kill startup
                logger.warning("skipping transcript %s: %s", path, exc)
                continue
            for warning in restored.warnings:
                logger.warning("%s", warning)
            # resume after, not before, everything already on the record
            newest = max(
                (m.sent_at for log in restored.session.envs.values() for m in log),
                default=restored.session.created_at,
            )
            self.clock.ensure_at_least(newest + 1)
            runtime = SessionRuntime(
                restored.session,
                self.backend,
                clock=self.clock,
                ids=self.ids,
                sink=self._transcript_sink(restored.session.id),
                model_name=self.config.model_name,
                emit_header=False,
            )
            tokens = restored.join_tokens or {}
            actor = SessionActor(runtime, self.clock, tokens)
            self.sessions[restored.session.id] = actor
            actor.start()

    async def shutdown(self) -> None:
        for actor in self.sessions.values():
            await actor.stop()
        for stream in self._transcript_files:
            stream.close()


def create_app(config: ServiceConfig, backend=None) -> FastAPI:
    service = ChatService(config, backend=backend)

    @contextlib.asynccontextmanager
    async def lifespan(_: FastAPI):
        service.restore_sessions()
        yield
        await service.shutdown()

    app = FastAPI(title="dyadchat", lifespan=lifespan)
    app.state.service = service

    @app.post("/sessions")
    async def create_session(request: CreateSessionRequest) -> dict[str, Any]:
        # runs on the event loop so the session actor task can be spawned
        return service.create_session(request)

    @app.websocket("/sessions/{session_id}/events")
    async def events(websocket: WebSocket, session_id: str) -> None:
        token = websocket.query_params.get("token", "")
        after_id = websocket.query_params.get("after_id")
        actor = service.sessions.get(session_id)
        await websocket.accept()
        if actor is None or token not in actor.tokens:
            await websocket.send_json(
                {"type": "error", "code": "invalid_token", "detail": "unknown session or token"}
            )
            await websocket.close(code=WS_INVALID_TOKEN)
            return
        if token in actor.active_tokens:
            await websocket.send_json(
                {"type": "error", "code": "already_joined", "detail": "token already in use"}
            )
            await websocket.close(code=WS_ALREADY_JOINED)
            return

        actor.active_tokens.add(token)
        connection = ClientConnection(env=actor.tokens[token], token=token)
        await actor.commands.put(_Join(connection, after_id))

        async def pump_outbox() -> None:
            while True:
                event = await connection.outbox.get()
                await websocket.send_json(event)

        writer = asyncio.create_task(pump_outbox())
        try:
            while True:
                try:
                    raw = await websocket.receive_json()
                except json.JSONDecodeError:
                    connection.push(
                        {"type": "error", "code": "bad_event", "detail": "payload must be JSON"}
                    )
                    continue
                kind = raw.get("type")
                if kind == "send":
                    await actor.commands.put(
                        _Send(connection, raw.get("text", ""), raw.get("correlation_id"))
                    )
                elif kind == "history":
                    await actor.commands.put(_History(connection, raw.get("after_id")))
                else:
                    connection.push(
                        {"type": "error", "code": "bad_event", "detail": f"unknown type {kind!r}"}
                    )
        except WebSocketDisconnect:
            pass
        finally:
            writer.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await writer
            actor.remove_connection(connection)

    return app


def serve_forever(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
