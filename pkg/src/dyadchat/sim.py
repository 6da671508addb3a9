"""Deterministic simulation harness.

Runs a scripted dyad on a virtual clock with the scripted gateway. The run
output — the session's JSON-lines transcript plus metrics computed from it —
is byte-identical across runs for the same scenario and seed, which makes
transcripts usable as golden files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .clock import ScaledClock, VirtualClock
from .domain import IdFactory, Participant, Session, SessionConfig, new_session
from .gateway import ScriptedBackend, ScriptParseError, parse_script
from .orchestrator import SessionRuntime
from .presets import load_policy_pair
from .transcript import dump_event

# Fields the structural diff skips: ids vary run-to-run under a
# non-deterministic id source or wall clock, and the header's policy blob is
# configuration rather than behavior — a changed policy shows up where it
# first alters the event stream.
VOLATILE_FIELDS = frozenset(
    {"id", "item_id", "session_id", "agent_id", "join_tokens", "latency_ms", "policy"}
)


class ScenarioParseError(Exception):
    """Scenario file missing, malformed, or violating timeline rules."""


@dataclass(frozen=True)
class TimelineEntry:
    time_ms: int
    env_name: str  # participant display name
    text: str


@dataclass(frozen=True)
class Scenario:
    participants: tuple[str, str]
    preset: str
    rules: list[dict[str, Any]]
    timeline: tuple[TimelineEntry, ...]
    stop_time_ms: int
    preset_dir: Path | None = None

    def __post_init__(self) -> None:
        times = [entry.time_ms for entry in self.timeline]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ScenarioParseError("timeline must be sorted by time")
        if any(t >= self.stop_time_ms for t in times):
            raise ScenarioParseError("all timeline times must be < stop_time_ms")
        if self.participants[0] == self.participants[1]:
            raise ScenarioParseError("participants must be distinct")


def parse_scenario(data: Any, *, preset_dir: Path | None = None) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioParseError(f"scenario must be a JSON object, got {type(data).__name__}")
    try:
        participants = data["participants"]
        timeline_raw = data["timeline"]
        stop_time_ms = data["stop_time_ms"]
    except KeyError as exc:
        raise ScenarioParseError(f"missing required field {exc.args[0]!r}") from exc
    if (
        not isinstance(participants, list)
        or len(participants) != 2
        or not all(isinstance(p, str) and p for p in participants)
    ):
        raise ScenarioParseError("'participants' must be two non-empty names")
    if not isinstance(stop_time_ms, int) or stop_time_ms <= 0:
        raise ScenarioParseError("'stop_time_ms' must be a positive integer")

    timeline = []
    for i, raw in enumerate(timeline_raw):
        try:
            timeline.append(
                TimelineEntry(time_ms=raw["time_ms"], env_name=raw["env"], text=raw["text"])
            )
        except (TypeError, KeyError) as exc:
            raise ScenarioParseError(f"timeline entry {i}: missing field {exc}") from exc
        if timeline[-1].env_name not in participants:
            raise ScenarioParseError(
                f"timeline entry {i}: unknown environment {timeline[-1].env_name!r}"
            )

    try:
        rules = data.get("script", [])
        parse_script(rules)  # validate eagerly; backend is rebuilt per run
    except ScriptParseError as exc:
        raise ScenarioParseError(f"embedded script: {exc}") from exc

    return Scenario(
        participants=(participants[0], participants[1]),
        preset=data.get("preset", "first-time"),
        rules=rules,
        timeline=tuple(timeline),
        stop_time_ms=stop_time_ms,
        preset_dir=preset_dir,
    )


def load_scenario(path: str | Path) -> Scenario:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_scenario(data)


@dataclass
class RunMetrics:
    """Outer-loop health figures computed from a transcript."""

    items_created: int = 0
    items_transferred: int = 0
    items_delivered: int = 0
    extraction_none: int = 0
    delivery_latency_ms: dict[str, int] = field(default_factory=dict)
    messages_per_env: dict[str, int] = field(default_factory=dict)
    dropped_batches: int = 0
    gateway_calls: dict[str, int] = field(default_factory=lambda: {
        "extraction": 0,
        "generation": 0,
        "validation": 0,
    })

    def __post_init__(self) -> None:
        if not self.items_delivered <= self.items_transferred <= self.items_created:
            raise ValueError(
                f"metric conservation violated: delivered={self.items_delivered} "
                f"transferred={self.items_transferred} created={self.items_created}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "items_created": self.items_created,
            "items_transferred": self.items_transferred,
            "items_delivered": self.items_delivered,
            "extraction_none": self.extraction_none,
            "delivery_latency_ms": self.delivery_latency_ms,
            "messages_per_env": self.messages_per_env,
            "dropped_batches": self.dropped_batches,
            "gateway_calls": self.gateway_calls,
        }


def metrics_from_events(events: list[dict[str, Any]]) -> RunMetrics:
    created = transferred = delivered = none_count = dropped = 0
    latency: dict[str, int] = {}
    per_env: dict[str, int] = {}
    calls = {"extraction": 0, "generation": 0, "validation": 0}
    item_created_at: dict[str, int] = {}

    for event in events:
        kind = event["type"]
        if kind == "message":
            per_env[event["env"]] = per_env.get(event["env"], 0) + 1
        elif kind == "dispatch":
            per_env[event["env"]] = per_env.get(event["env"], 0) + len(event["messages"])
        elif kind == "extraction":
            calls["extraction"] += 1
            if event["outcome"] == "item":
                created += 1
                item_created_at[event["item"]["id"]] = event["item"]["created_at"]
            else:
                none_count += 1
        elif kind == "transfer":
            transferred += 1
        elif kind == "generation":
            calls["generation"] += 1
        elif kind == "validation":
            calls["validation"] += 1
            if event["status"] == "delivered" and event["item_id"] not in latency:
                delivered += 1
                created_at = item_created_at.get(event["item_id"])
                if created_at is not None:
                    latency[event["item_id"]] = event["at"] - created_at
        elif kind == "error":
            if event["code"] == "stale_batch":
                dropped += 1
            elif event["code"] == "gateway_error":
                where = event.get("where")
                if where in calls:
                    calls[where] += 1

    return RunMetrics(
        items_created=created,
        items_transferred=transferred,
        items_delivered=delivered,
        extraction_none=none_count,
        delivery_latency_ms=latency,
        messages_per_env=per_env,
        dropped_batches=dropped,
        gateway_calls=calls,
    )


@dataclass
class SimResult:
    events: list[dict[str, Any]]
    metrics: RunMetrics
    session: Session

    @property
    def transcript_lines(self) -> list[str]:
        return [dump_event(event) for event in self.events]

    def transcript_text(self) -> str:
        return "".join(line + "\n" for line in self.transcript_lines)


def _build_runtime(scenario: Scenario, clock, collected: list[dict[str, Any]]) -> SessionRuntime:
    first, second = scenario.participants
    # namespaced per dyad: repeat runs of one scenario share ids (byte-stable
    # transcripts) while differently-named scenarios never collide
    ids = IdFactory.deterministic(f"scenario/{first}/{second}")
    policy_first, policy_second = load_policy_pair(scenario.preset, scenario.preset_dir)
    config = SessionConfig(
        participants=(
            Participant(user_id=ids.new_id("user"), display_name=first),
            Participant(user_id=ids.new_id("user"), display_name=second),
        ),
        policies=(policy_first, policy_second),
    )
    session = new_session(config, ids=ids, now_ms=clock.now_ms())
    backend = ScriptedBackend(parse_script(scenario.rules))
    return SessionRuntime(
        session, backend, clock=clock, ids=ids, sink=collected.append
    )


def run_scenario(
    scenario: Scenario | str | Path,
    seed: int = 0,
    *,
    real_time_scale: float | None = None,
) -> SimResult:
    """Execute a scenario to completion.

    ``seed`` is accepted for interface stability but currently influences
    nothing: every backend in the simulator is deterministic. When
    ``real_time_scale`` is given the run uses real timers accelerated by that
    factor instead of jumping the virtual clock; event order is identical,
    timestamps carry scheduling jitter.
    """
    del seed
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)

    events: list[dict[str, Any]] = []
    if real_time_scale is None:
        clock: Any = VirtualClock(0)
    else:
        clock = ScaledClock(scale=real_time_scale, origin_ms=0)
    runtime = _build_runtime(scenario, clock, events)
    name_to_env = {p.display_name: p.user_id for p in runtime.session.participants}

    index = 0
    while True:
        due = runtime.next_due_ms()
        timeline_at = (
            scenario.timeline[index].time_ms if index < len(scenario.timeline) else None
        )
        if due is not None and due > scenario.stop_time_ms:
            due = None  # abandoned: queue outlives the scenario
        if due is None and timeline_at is None:
            break
        # Due sends fire before a human message at the same instant: the main
        # loop checks the queue continuously, so anything due by the time a
        # message lands has already gone out.
        if timeline_at is None or (due is not None and due <= timeline_at):
            target = due
            action = "dispatch"
        else:
            target = timeline_at
            action = "message"

        if isinstance(clock, VirtualClock):
            clock.set_ms(max(clock.now_ms(), target))
        else:
            time.sleep(clock.wall_seconds_until(target))

        if action == "dispatch":
            runtime.dispatch_ready(target)
        else:
            entry = scenario.timeline[index]
            index += 1
            runtime.on_human_message(name_to_env[entry.env_name], entry.text)

    return SimResult(
        events=events, metrics=metrics_from_events(events), session=runtime.session
    )


# --------------------------------------------------------------------- diffing


@dataclass(frozen=True)
class Difference:
    path: str
    left: Any
    right: Any

    def __str__(self) -> str:
        return f"{self.path}: {self.left!r} != {self.right!r}"


def _diff_value(path: str, left: Any, right: Any, out: list[Difference]) -> None:
    if isinstance(left, dict) and isinstance(right, dict):
        for key in sorted(set(left) | set(right)):
            if key in VOLATILE_FIELDS:
                continue
            sub = f"{path}.{key}" if path else key
            if key not in left:
                out.append(Difference(sub, "<absent>", right[key]))
            elif key not in right:
                out.append(Difference(sub, left[key], "<absent>"))
            else:
                _diff_value(sub, left[key], right[key], out)
    elif isinstance(left, list) and isinstance(right, list):
        for i in range(max(len(left), len(right))):
            sub = f"{path}[{i}]"
            if i >= len(left):
                out.append(Difference(sub, "<absent>", right[i]))
            elif i >= len(right):
                out.append(Difference(sub, left[i], "<absent>"))
            else:
                _diff_value(sub, left[i], right[i], out)
    elif left != right:
        out.append(Difference(path, left, right))


def diff_transcript_lines(left: list[str], right: list[str]) -> list[Difference]:
    """Field-level diff of two transcripts, ignoring volatile id fields."""
    differences: list[Difference] = []
    for i in range(max(len(left), len(right))):
        path = f"line {i + 1}"
        if i >= len(left):
            differences.append(Difference(path, "<missing line>", right[i].strip()))
            continue
        if i >= len(right):
            differences.append(Difference(path, left[i].strip(), "<missing line>"))
            continue
        try:
            a = json.loads(left[i])
            b = json.loads(right[i])
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"{path}: not valid JSON: {exc.msg}") from exc
        _diff_value(path, a, b, differences)
    return differences


def diff_transcripts(path_a: str | Path, path_b: str | Path) -> list[Difference]:
    lines = []
    for path in (path_a, path_b):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioParseError(f"cannot read transcript {path}: {exc}") from exc
        lines.append([line for line in text.split("\n") if line.strip()])
    return diff_transcript_lines(lines[0], lines[1])
