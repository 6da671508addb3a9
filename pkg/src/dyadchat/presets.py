"""Agent policy presets stored as JSON documents.

A preset file carries the three prompt templates inline as strings plus the
timing parameters. Presets may define ``side_overrides`` so the two agents of
a dyad behave differently (e.g. translate in opposite directions).
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Any

from .domain import (
    DEFAULT_DELAY_SECONDS_PER_CHAR,
    DEFAULT_MAX_HISTORY_MESSAGES,
    DEFAULT_SENTENCE_DELIMITERS,
    AgentPolicy,
    DomainError,
    PromptTemplate,
)

DEFAULT_PRESET = "first-time"


class UnknownPreset(Exception):
    """No preset file with that name in the preset directory."""


class SchemaError(Exception):
    """Preset JSON does not describe a valid agent policy."""


def packaged_preset_dir() -> Path:
    return Path(str(resources.files("dyadchat") / "presets"))


def policy_to_dict(policy: AgentPolicy) -> dict[str, Any]:
    return {
        "name": policy.name,
        "delay_seconds_per_char": policy.delay_seconds_per_char,
        "sentence_delimiters": sorted(policy.sentence_delimiters),
        "max_history_messages": policy.max_history_messages,
        "extraction": {
            "system": policy.extraction_template.system_text,
            "user": policy.extraction_template.user_text,
        },
        "validation": {
            "system": policy.validation_template.system_text,
            "user": policy.validation_template.user_text,
        },
        "conversation": {
            "system": policy.conversation_template.system_text,
            "user": policy.conversation_template.user_text,
        },
    }


def _template_from_dict(field: str, raw: Any) -> PromptTemplate:
    if not isinstance(raw, dict) or not isinstance(raw.get("system"), str) or not isinstance(
        raw.get("user"), str
    ):
        raise SchemaError(f"field {field!r} must be an object with string 'system' and 'user'")
    try:
        return PromptTemplate(system_text=raw["system"], user_text=raw["user"])
    except DomainError as exc:
        raise SchemaError(f"field {field!r}: {exc}") from exc


def policy_from_dict(data: dict[str, Any]) -> AgentPolicy:
    if not isinstance(data, dict):
        raise SchemaError("policy must be a JSON object")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaError("field 'name' must be a non-empty string")
    for required in ("extraction", "validation", "conversation"):
        if required not in data:
            raise SchemaError(f"missing template field {required!r}")

    delimiters = data.get("sentence_delimiters")
    if delimiters is None:
        delimiter_set = DEFAULT_SENTENCE_DELIMITERS
    elif isinstance(delimiters, list) and all(
        isinstance(d, str) and len(d) == 1 for d in delimiters
    ):
        delimiter_set = frozenset(delimiters)
    else:
        raise SchemaError("field 'sentence_delimiters' must be a list of single characters")

    try:
        return AgentPolicy(
            name=name,
            extraction_template=_template_from_dict("extraction", data["extraction"]),
            validation_template=_template_from_dict("validation", data["validation"]),
            conversation_template=_template_from_dict("conversation", data["conversation"]),
            delay_seconds_per_char=float(
                data.get("delay_seconds_per_char", DEFAULT_DELAY_SECONDS_PER_CHAR)
            ),
            sentence_delimiters=delimiter_set,
            max_history_messages=int(
                data.get("max_history_messages", DEFAULT_MAX_HISTORY_MESSAGES)
            ),
        )
    except (DomainError, TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from exc


def _read_preset_file(name: str, preset_dir: Path | None) -> dict[str, Any]:
    directory = preset_dir or packaged_preset_dir()
    path = directory / f"{name}.json"
    if not path.is_file():
        raise UnknownPreset(f"no preset {name!r} in {directory}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: preset must be a JSON object")
    return data


def _merge_overrides(base: dict[str, Any], overrides: Any) -> dict[str, Any]:
    if not isinstance(overrides, dict):
        raise SchemaError("side override must be a JSON object")
    merged = dict(base)
    for key, value in overrides.items():
        if key in ("extraction", "validation", "conversation") and isinstance(value, dict):
            template = dict(base.get(key, {}))
            template.update(value)
            merged[key] = template
        else:
            merged[key] = value
    return merged


def load_preset(name: str, preset_dir: Path | None = None) -> AgentPolicy:
    """Load and validate a preset; side overrides are not applied here."""
    data = _read_preset_file(name, preset_dir)
    data.pop("side_overrides", None)
    data.pop("origin", None)
    data.pop("notes", None)
    return policy_from_dict(data)


def load_policy_pair(name: str, preset_dir: Path | None = None) -> tuple[AgentPolicy, AgentPolicy]:
    """Policies for the two environments, with per-side overrides applied.

    ``first`` configures the agent in the first participant's environment,
    ``second`` the other. Presets without overrides yield two equal policies.
    """
    data = _read_preset_file(name, preset_dir)
    overrides = data.pop("side_overrides", None) or {}
    data.pop("origin", None)
    data.pop("notes", None)
    unknown = set(overrides) - {"first", "second"}
    if unknown:
        raise SchemaError(f"side_overrides keys must be 'first'/'second', got {sorted(unknown)}")
    policies = []
    for side in ("first", "second"):
        side_data = _merge_overrides(data, overrides[side]) if side in overrides else data
        policies.append(policy_from_dict(side_data))
    return policies[0], policies[1]


def available_presets(preset_dir: Path | None = None) -> list[str]:
    directory = preset_dir or packaged_preset_dir()
    return sorted(path.stem for path in directory.glob("*.json"))
