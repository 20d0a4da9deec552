"""Domain records shared by every part of the memory engine.

These are plain immutable records, not database models: the episodic and
semantic stores are kept in memory and persisted as JSON lines (see
``persistence.py``).
"""
import base64
import hashlib
import json
import random
import string
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone as dt_timezone

import numpy as np
from dateutil import parser as date_parser
from django.core.exceptions import ValidationError
from django.db import models
from django.utils import timezone

EPISODE_PREFIX = "ep"
FACT_PREFIX = "fact"
FORMAT_VERSION = 1


class Role(models.TextChoices):
    """Speaker of a conversational turn"""

    USER = "user"
    ASSISTANT = "assistant"


def parse_timestamp(value):
    """Parses an ISO-8601 value (offset optional) into an aware UTC datetime.

    Args:
        value (str or datetime): timestamp to parse. Naive values are taken as UTC.

    Raises:
        ValidationError: if the value can't be parsed

    Returns:
        datetime: timestamp in UTC
    """
    if isinstance(value, datetime):
        parsed = value
    else:
        try:
            parsed = date_parser.isoparse(str(value))
        except (ValueError, OverflowError, TypeError):
            raise ValidationError(f"Invalid timestamp: {value!r}")
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=dt_timezone.utc)
    return parsed.astimezone(dt_timezone.utc)


def format_timestamp(value):
    return value.astimezone(dt_timezone.utc).isoformat()


def join_title_body(title, body):
    """Concatenation used for every embedded title/body pair: title, one newline, body"""
    return f"{title}\n{body}"


def encode_embedding(vector):
    """Base64 of the little-endian float32 bytes of a vector"""
    data = np.asarray(vector, dtype="<f4").tobytes()
    return base64.b64encode(data).decode("ascii")


def decode_embedding(encoded):
    data = base64.b64decode(encoded.encode("ascii"))
    return np.frombuffer(data, dtype="<f4").astype(np.float32)


def _frozen_vector(vector):
    # Stores keep float32 so that what is persisted is exactly what is searched
    array = np.array(vector, dtype=np.float32)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Message:
    """One conversational turn"""

    role: str
    content: str
    timestamp: datetime

    @classmethod
    def create(cls, role, content, timestamp):
        """Builds a validated message from raw (wire) values"""
        message = cls(role=str(role), content=content, timestamp=parse_timestamp(timestamp))
        message.clean()
        return message

    def clean(self):
        """Validation of the message invariants"""
        if self.role not in Role.values:
            raise ValidationError(f"Invalid role: {self.role!r}")
        if not isinstance(self.content, str) or not self.content.strip():
            raise ValidationError("Message content is empty")
        if not isinstance(self.timestamp, datetime) or self.timestamp.tzinfo is None:
            raise ValidationError("Message timestamp must be an aware datetime")

    def render(self):
        return f"[{self.timestamp:%Y-%m-%d %H:%M:%S} UTC] {self.role}: {self.content}"

    def to_dict(self):
        return {
            "role": self.role,
            "content": self.content,
            "timestamp": format_timestamp(self.timestamp),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls.create(data["role"], data["content"], data["timestamp"])
        except (KeyError, TypeError):
            raise ValidationError("Message needs role, content and timestamp")


def render_messages(messages):
    return "\n".join(message.render() for message in messages)


@dataclass(frozen=True)
class MessageBuffer:
    """Messages accumulated for a user since the last segment was cut"""

    user_id: str
    messages: tuple = ()
    created_at: datetime = None

    def __len__(self):
        return len(self.messages)

    def append(self, message):
        """Returns a new buffer with the message at the end"""
        if self.messages and message.timestamp < self.messages[-1].timestamp:
            raise ValidationError(
                f"Message at {format_timestamp(message.timestamp)} precedes the buffered conversation"
            )
        return replace(self, messages=self.messages + (message,))


@dataclass(frozen=True)
class BoundaryDecision:
    is_boundary: bool
    confidence: float
    # Degradation markers, e.g. "clamped" or "parse_failure"
    flags: tuple = ()

    @classmethod
    def clamped(cls, is_boundary, confidence, flags=()):
        """Builds a decision, clamping the confidence into [0, 1] and flagging it if needed"""
        confidence = float(confidence)
        if confidence < 0.0 or confidence > 1.0:
            confidence = min(max(confidence, 0.0), 1.0)
            flags = tuple(flags) + ("clamped",)
        return cls(is_boundary=bool(is_boundary), confidence=confidence, flags=tuple(flags))

    def to_dict(self):
        return {
            "is_boundary": self.is_boundary,
            "confidence": self.confidence,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            is_boundary=data["is_boundary"],
            confidence=data["confidence"],
            flags=tuple(data.get("flags", ())),
        )


@dataclass(frozen=True, eq=False)
class Episode:
    """A segmented experience: title, third-person narrative and its source messages"""

    id: str
    user_id: str
    title: str
    narrative: str
    source_messages: tuple
    embedding: np.ndarray
    created_at: datetime

    def __post_init__(self):
        object.__setattr__(self, "source_messages", tuple(self.source_messages))
        object.__setattr__(self, "embedding", _frozen_vector(self.embedding))
        if not self.title.strip() or not self.narrative.strip():
            raise ValidationError("Episode title and narrative must be non-empty")
        if not self.source_messages:
            raise ValidationError("Episode needs at least one source message")

    @property
    def time_span(self):
        return (self.source_messages[0].timestamp, self.source_messages[-1].timestamp)

    @property
    def embedding_text(self):
        return join_title_body(self.title, self.narrative)

    def to_dict(self):
        start, end = self.time_span
        return {
            "id": self.id,
            "user_id": self.user_id,
            "title": self.title,
            "narrative": self.narrative,
            "source_messages": [m.to_dict() for m in self.source_messages],
            "time_span": [format_timestamp(start), format_timestamp(end)],
            "created_at": format_timestamp(self.created_at),
            "embedding": encode_embedding(self.embedding),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            user_id=data["user_id"],
            title=data["title"],
            narrative=data["narrative"],
            source_messages=[Message.from_dict(m) for m in data["source_messages"]],
            embedding=decode_embedding(data["embedding"]),
            created_at=parse_timestamp(data["created_at"]),
        )


@dataclass(frozen=True, eq=False)
class SemanticFact:
    """One distilled knowledge statement"""

    id: str
    user_id: str
    statement: str
    embedding: np.ndarray
    source_episode_id: str
    created_at: datetime

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen_vector(self.embedding))
        if not self.statement.strip():
            raise ValidationError("Fact statement must be non-empty")

    def to_dict(self):
        return {
            "id": self.id,
            "user_id": self.user_id,
            "statement": self.statement,
            "source_episode_id": self.source_episode_id,
            "created_at": format_timestamp(self.created_at),
            "embedding": encode_embedding(self.embedding),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            user_id=data["user_id"],
            statement=data["statement"],
            embedding=decode_embedding(data["embedding"]),
            source_episode_id=data["source_episode_id"],
            created_at=parse_timestamp(data["created_at"]),
        )


@dataclass(frozen=True)
class EngineConfig:
    """Tunable parameters of the engine. Defaults follow the reference setup."""

    boundary_confidence_threshold: float = 0.7
    max_buffer_size: int = 25
    similarity_threshold: float = 0.0
    top_k_episodes: int = 10
    semantic_multiplier: int = 2
    raw_text_episode_count: int = 2
    semantic_retrieval_limit_for_learning: int = 20
    # Detector prompt truncation
    detector_context_messages: int = 15
    detector_token_budget: int = 3000
    # Ablation switches
    episodic_retrieval: bool = True
    semantic_retrieval: bool = True
    direct_extraction: bool = False

    @property
    def top_k_facts(self):
        return self.semantic_multiplier * self.top_k_episodes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        """Builds a config from a (possibly partial) mapping. Unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValidationError(f"Unknown configuration key: {key}")
        return cls(**data)

    def override(self, **values):
        """Copy with the given values replaced; None values are ignored"""
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def digest(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_count(value):
    return isinstance(value, int) and not isinstance(value, bool)


def validate_config(cfg):
    """Checks every EngineConfig invariant.

    Args:
        cfg (EngineConfig): configuration to check

    Raises:
        ValidationError: naming the first offending field

    Returns:
        EngineConfig: the same config, unchanged
    """
    ranges = {
        "boundary_confidence_threshold": (0.0, 1.0),
        "similarity_threshold": (-1.0, 1.0),
    }
    for name, (low, high) in ranges.items():
        value = getattr(cfg, name)
        if not _is_number(value) or not low <= value <= high:
            raise ValidationError(f"{name} out of range")
    positive = [
        "max_buffer_size",
        "top_k_episodes",
        "semantic_multiplier",
        "semantic_retrieval_limit_for_learning",
        "detector_context_messages",
        "detector_token_budget",
    ]
    for name in positive:
        value = getattr(cfg, name)
        if not _is_count(value) or value < 1:
            raise ValidationError(f"{name} out of range")
    if not _is_count(cfg.raw_text_episode_count) or cfg.raw_text_episode_count < 0:
        raise ValidationError("raw_text_episode_count out of range")
    if cfg.raw_text_episode_count > cfg.top_k_episodes:
        raise ValidationError(
            "raw_text_episode_count out of range: must not exceed top_k_episodes"
        )
    for name in ("episodic_retrieval", "semantic_retrieval", "direct_extraction"):
        if not isinstance(getattr(cfg, name), bool):
            raise ValidationError(f"{name} must be a boolean")
    return cfg


class SequentialIds:
    """Deterministic ids for replays: one counter per prefix, ep-000001, ep-000002, ..."""

    deterministic = True

    def __init__(self):
        self._counters = defaultdict(int)
        self._lock = threading.Lock()

    def new_id(self, prefix=EPISODE_PREFIX):
        with self._lock:
            self._counters[prefix] += 1
            return f"{prefix}-{self._counters[prefix]:06d}"

    def observe(self, item_id):
        """Moves the counter past an id loaded from disk"""
        prefix, _, number = item_id.rpartition("-")
        if prefix and number.isdigit():
            with self._lock:
                self._counters[prefix] = max(self._counters[prefix], int(number))


class RandomIds:
    """Collision-resistant random codes, e.g. ep-Xk2P9aQw7LmN0bTz"""

    deterministic = False
    CODE_LENGTH = 16
    _random = random.SystemRandom()

    def new_id(self, prefix=EPISODE_PREFIX):
        code = "".join(
            self._random.choices(string.ascii_letters + string.digits, k=self.CODE_LENGTH)
        )
        return f"{prefix}-{code}"

    def observe(self, item_id):
        pass


class SystemClock:
    def now(self, reference=None):
        return timezone.now()


class ReplayClock:
    """Clock for replays: time is taken from the data being processed"""

    EPOCH = datetime(1970, 1, 1, tzinfo=dt_timezone.utc)

    def now(self, reference=None):
        return reference if reference is not None else self.EPOCH
