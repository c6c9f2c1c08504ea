"""Wire envelope, correlation ids and broadcast filters.

Envelopes travel as UTF-8 JSON objects with exactly seven keys::

    {"kind", "correlation_id", "sender", "subject", "recipient_id", "body", "no_reply"}

``redelivered`` is delivery metadata set by the broker and is never serialised.
"""
from __future__ import annotations

import enum
import functools
import json
import math
import re
import random
from dataclasses import dataclass, field
from typing import Any, Optional

from .exceptions import DecodeError, EncodingError, ErrorCategory, ErrorInfo

__all__ = (
    "MessageKind",
    "Envelope",
    "encode_envelope",
    "decode_envelope",
    "new_correlation_id",
    "BroadcastFilter",
    "filter_matches",
    "check_structured",
    "WIRE_KEYS",
    "reply_ok",
    "reply_error",
    "parse_reply",
)

WIRE_KEYS = ("kind", "correlation_id", "sender", "subject", "recipient_id", "body", "no_reply")


class MessageKind(str, enum.Enum):
    TASK = "TASK"
    TASK_REPLY = "TASK_REPLY"
    RPC_REQUEST = "RPC_REQUEST"
    RPC_REPLY = "RPC_REPLY"
    BROADCAST = "BROADCAST"


_KINDS = {kind.value: kind for kind in MessageKind}


@dataclass(frozen=True)
class Envelope:
    kind: MessageKind
    correlation_id: str
    body: Any = None
    sender: Optional[str] = None
    subject: Optional[str] = None
    recipient_id: Optional[str] = None
    no_reply: bool = False
    redelivered: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.kind, MessageKind):
            object.__setattr__(self, "kind", MessageKind(self.kind))
        if not isinstance(self.correlation_id, str) or not self.correlation_id:
            raise ValueError("correlation_id must be a non-empty string")
        if self.kind is MessageKind.RPC_REQUEST and not self.recipient_id:
            raise ValueError("RPC_REQUEST envelopes need a recipient_id")


def new_correlation_id() -> str:
    """128 random bits as 32 lowercase hex characters."""
    # The module PRNG is seeded from os.urandom and reseeded after fork; calling
    # os.urandom per message would release the GIL on every send.
    return f"{random.getrandbits(128):032x}"


def check_structured(value: Any, _depth: int = 0) -> None:
    """Raise EncodingError unless ``value`` is built from JSON-native types only."""
    if _depth > 500:
        raise EncodingError("structure nested too deeply")
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodingError(f"non-finite float {value!r} is not encodable")
        return
    if isinstance(value, list):
        for item in value:
            check_structured(item, _depth + 1)
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodingError(f"mapping keys must be strings, got {key!r}")
            check_structured(item, _depth + 1)
        return
    raise EncodingError(f"value of type {type(value).__name__} is not a structured value")


def encode_envelope(env: Envelope) -> bytes:
    check_structured(env.body)
    for name in ("sender", "subject", "recipient_id"):
        val = getattr(env, name)
        if val is not None and not isinstance(val, str):
            raise EncodingError(f"{name} must be a string or None")
    payload = {
        "kind": env.kind.value,
        "correlation_id": env.correlation_id,
        "sender": env.sender,
        "subject": env.subject,
        "recipient_id": env.recipient_id,
        "body": env.body,
        "no_reply": bool(env.no_reply),
    }
    try:
        return json.dumps(payload, allow_nan=False, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise EncodingError(str(exc)) from exc


def _optional_str(obj: dict, key: str) -> Optional[str]:
    val = obj[key]
    if val is not None and not isinstance(val, str):
        raise DecodeError(f"{key!r} must be a string or null")
    return val


def decode_envelope(raw: bytes) -> Envelope:
    try:
        obj = json.loads(raw)
    except (ValueError, TypeError, RecursionError) as exc:
        raise DecodeError(f"malformed envelope: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("envelope must be a JSON object")
    missing = [key for key in WIRE_KEYS if key not in obj]
    if missing:
        raise DecodeError(f"envelope missing keys: {', '.join(missing)}")
    kind = _KINDS.get(obj["kind"]) if isinstance(obj["kind"], str) else None
    if kind is None:
        raise DecodeError(f"unknown envelope kind {obj['kind']!r}")
    if not isinstance(obj["no_reply"], bool):
        raise DecodeError("'no_reply' must be a boolean")
    try:
        return Envelope(
            kind=kind,
            correlation_id=obj["correlation_id"],
            body=obj["body"],
            sender=_optional_str(obj, "sender"),
            subject=_optional_str(obj, "subject"),
            recipient_id=_optional_str(obj, "recipient_id"),
            no_reply=obj["no_reply"],
        )
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc


@functools.lru_cache(maxsize=1024)
def _glob_regex(pattern: str) -> "re.Pattern[str]":
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")), re.DOTALL)


def _glob_match(pattern: str, value: Optional[str]) -> bool:
    if value is None:
        return bool(pattern) and not pattern.strip("*")
    if pattern == "*":
        return True
    if "*" not in pattern:
        return pattern == value
    return _glob_regex(pattern).fullmatch(value) is not None


@dataclass(frozen=True)
class BroadcastFilter:
    """Glob patterns on sender and subject; ``*`` is the only wildcard."""

    sender: str = "*"
    subject: str = "*"

    def matches(self, sender: Optional[str], subject: Optional[str]) -> bool:
        return _glob_match(self.sender, sender) and _glob_match(self.subject, subject)


def filter_matches(filt: BroadcastFilter, sender: Optional[str], subject: Optional[str]) -> bool:
    return filt.matches(sender, subject)


def reply_ok(value: Any) -> dict:
    return {"result": value}


def reply_error(info) -> dict:
    return {"error": info.to_dict()}


def parse_reply(body: Any):
    """Split a reply body into ``(value, ErrorInfo | None)``."""
    if isinstance(body, dict) and "error" in body:
        try:
            return None, ErrorInfo.from_dict(body["error"])
        except (KeyError, TypeError, ValueError):
            return None, ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, f"malformed error reply: {body!r}")
    if isinstance(body, dict) and "result" in body:
        return body["result"], None
    return None, ErrorInfo(ErrorCategory.REMOTE_EXCEPTION, f"malformed reply: {body!r}")
