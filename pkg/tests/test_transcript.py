from __future__ import annotations

import pytest

from dyadchat.domain import InfoItemStatus
from dyadchat.engine import build_task_list
from dyadchat.sim import parse_scenario, run_scenario
from dyadchat.transcript import (
    CorruptTranscript,
    restore_events,
    restore_transcript,
)
from helpers import CINEMA_ITEM, cinema_scenario, snapshot


@pytest.fixture
def finished_run():
    result = run_scenario(parse_scenario(cinema_scenario()))
    restored = restore_events(result.transcript_lines)
    return result, restored


def test_round_trip_preserves_logs_and_statuses(finished_run) -> None:
    result, restored = finished_run
    # an independent second run gives the reference "live" state
    live = run_scenario(parse_scenario(cinema_scenario()))
    assert snapshot(restored.session) == snapshot(restore_events(live.transcript_lines).session)
    delivered = [
        item
        for agent in restored.session.agents.values()
        for item in agent.knowledge_base.items
    ]
    assert [item.status for item in delivered] == [InfoItemStatus.DELIVERED]
    assert restored.warnings == []


def test_restored_pending_item_feeds_next_task_list() -> None:
    scenario = cinema_scenario()
    scenario["script"][0]["response"] = "false"  # never confirmed as delivered
    result = run_scenario(parse_scenario(scenario))
    restored = restore_events(result.transcript_lines)
    target_env = next(
        env
        for env, agent in restored.session.agents.items()
        if agent.knowledge_base.items
    )
    kb = restored.session.agents[target_env].knowledge_base
    assert kb.items[0].pending
    assert CINEMA_ITEM in build_task_list(kb)


def test_truncated_final_line_recovers_with_warning(finished_run, tmp_path) -> None:
    result, _ = finished_run
    text = result.transcript_text()
    cut = text.rstrip("\n")
    truncated = cut[: len(cut) - len(cut.split("\n")[-1]) // 2 - 1]
    path = tmp_path / "torn.jsonl"
    path.write_text(truncated, encoding="utf-8")

    restored = restore_transcript(path)
    assert len(restored.warnings) == 1
    assert "truncated" in restored.warnings[0]
    # state equals a restore of all complete lines
    full_lines = result.transcript_lines
    reference = restore_events(full_lines[:-1])
    assert snapshot(restored.session) == snapshot(reference.session)


def test_corrupt_middle_line_reports_line_number(finished_run) -> None:
    result, _ = finished_run
    lines = list(result.transcript_lines)
    lines[2] = '{"type": "message", broken'
    with pytest.raises(CorruptTranscript) as excinfo:
        restore_events(lines)
    assert excinfo.value.line_no == 3


def test_transcript_must_start_with_session_header(finished_run) -> None:
    result, _ = finished_run
    with pytest.raises(CorruptTranscript, match="session header"):
        restore_events(result.transcript_lines[1:])


def test_empty_transcript_is_corrupt() -> None:
    with pytest.raises(CorruptTranscript):
        restore_events([])


def test_blank_lines_are_tolerated(finished_run) -> None:
    result, restored = finished_run
    lines = list(result.transcript_lines)
    lines.insert(1, "")
    lines.append("")
    again = restore_events(lines)
    assert snapshot(again.session) == snapshot(restored.session)


def test_restore_keeps_join_tokens_when_present(finished_run) -> None:
    result, _ = finished_run
    import json

    lines = list(result.transcript_lines)
    header = json.loads(lines[0])
    header["join_tokens"] = {"tok-a": header["participants"][0]["user_id"]}
    lines[0] = json.dumps(header)
    restored = restore_events(lines)
    assert restored.join_tokens == {"tok-a": header["participants"][0]["user_id"]}
