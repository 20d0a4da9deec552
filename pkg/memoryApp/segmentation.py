"""Per-user message buffers and topic segmentation.

Each arriving message is judged by the boundary detector against the user's
buffer. A segment is cut when the detector reports a boundary with enough
confidence, or when the buffer reaches its capacity.
"""
import logging
import math
import threading
from dataclasses import dataclass

from django.core.exceptions import ValidationError
from django.db import models

from .exceptions import ResponseParseError
from .llm import ChatRequest, ResponseFormat, RoleTag, extract_json
from .models import BoundaryDecision, MessageBuffer, ReplayClock, render_messages
from .prompts import render_prompt
from .retrieval import get_token_estimator

logger = logging.getLogger(__name__)

NO_DECISION = BoundaryDecision(is_boundary=False, confidence=0.0)
PARSE_FAILURE_FLAG = "parse_failure"


class TriggerCause(models.TextChoices):
    SEMANTIC_BOUNDARY = "semantic_boundary"
    BUFFER_FULL = "buffer_full"
    SESSION_END = "session_end"
    NONE = "none"


@dataclass(frozen=True)
class SegmentationOutcome:
    triggered: bool
    segment: tuple = None
    decision: BoundaryDecision = NO_DECISION
    trigger_cause: str = TriggerCause.NONE

    def __post_init__(self):
        if self.segment is not None:
            object.__setattr__(self, "segment", tuple(self.segment))
        if self.triggered != bool(self.segment):
            raise ValueError("A triggered outcome carries a non-empty segment, and only then")
        if self.triggered == (self.trigger_cause == TriggerCause.NONE):
            raise ValueError("trigger_cause is none exactly when nothing was triggered")

    def to_dict(self):
        return {
            "triggered": self.triggered,
            "trigger_cause": str(self.trigger_cause),
            "segment": [m.to_dict() for m in self.segment] if self.segment else None,
            "decision": self.decision.to_dict(),
        }


def _detector_prompt(new_message, buffer, cfg, estimator):
    messages = buffer.messages
    omitted = 0
    system_prompt, user_prompt = render_prompt(
        "boundary_detector",
        conversation=render_messages(messages),
        new_message=new_message.render(),
        omitted=omitted,
    )
    if estimator(system_prompt + user_prompt) > cfg.detector_token_budget:
        kept = messages[-cfg.detector_context_messages:]
        omitted = len(messages) - len(kept)
        system_prompt, user_prompt = render_prompt(
            "boundary_detector",
            conversation=render_messages(kept),
            new_message=new_message.render(),
            omitted=omitted,
        )
    return system_prompt, user_prompt


def _parse_decision(text):
    data = extract_json(text, "object")
    is_boundary = data.get("is_boundary")
    confidence = data.get("confidence")
    if not isinstance(is_boundary, bool):
        raise ResponseParseError("is_boundary must be a boolean")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise ResponseParseError("confidence must be a number")
    if not math.isfinite(confidence):
        raise ResponseParseError("confidence must be finite")
    return BoundaryDecision.clamped(is_boundary, confidence)


def detect_boundary(new_message, buffer, provider, cfg):
    """Asks the boundary detector whether the new message starts a new topic.

    An empty buffer has nothing to diverge from: (false, 0.0) is returned without
    calling the provider. Output that can't be parsed is asked for once more and
    then degrades to (false, 0.0) flagged as a parse failure.

    Args:
        new_message (Message): arriving message
        buffer (MessageBuffer): messages buffered so far
        provider (LLMProvider): chat backend
        cfg (EngineConfig): detector truncation parameters

    Raises:
        TransportError: if the provider stays unreachable

    Returns:
        BoundaryDecision: parsed, clamped decision
    """
    if not buffer.messages:
        return NO_DECISION
    system_prompt, user_prompt = _detector_prompt(new_message, buffer, cfg, get_token_estimator())
    request = ChatRequest(
        role_tag=RoleTag.BOUNDARY_DETECTOR,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.JSON_OBJECT,
        focus=new_message.render(),
    )
    for attempt in range(2):
        text = provider.chat(request)
        try:
            decision = _parse_decision(text)
        except ResponseParseError as exc:
            logger.warning(f"[{buffer.user_id}] Unparseable boundary decision (attempt {attempt + 1}): {exc}")
            continue
        if decision.flags:
            logger.warning(f"[{buffer.user_id}] Boundary confidence out of range, clamped to {decision.confidence}")
        return decision
    return BoundaryDecision(is_boundary=False, confidence=0.0, flags=(PARSE_FAILURE_FLAG,))


def should_trigger(decision, buffer_len, cfg):
    """Trigger rule: (boundary and confidence > threshold) or (length >= capacity).

    Returns:
        tuple: (triggered, TriggerCause); buffer_full wins when both conditions hold
    """
    if buffer_len < 0:
        raise ValidationError("buffer_len must be non-negative")
    if buffer_len >= cfg.max_buffer_size:
        return True, TriggerCause.BUFFER_FULL
    if decision.is_boundary and decision.confidence > cfg.boundary_confidence_threshold:
        return True, TriggerCause.SEMANTIC_BOUNDARY
    return False, TriggerCause.NONE


class Segmenter:
    """Holds one buffer per user. Appends for one user are serialized; distinct users
    proceed concurrently."""

    def __init__(self, provider, cfg, clock=None):
        self.provider = provider
        self.cfg = cfg
        self.clock = clock or ReplayClock()
        self._buffers = {}
        self._locks = {}
        self._registry_lock = threading.Lock()

    def user_lock(self, user_id):
        with self._registry_lock:
            if user_id not in self._locks:
                self._locks[user_id] = threading.RLock()
            return self._locks[user_id]

    def buffer(self, user_id):
        with self._registry_lock:
            return self._buffers.get(user_id) or MessageBuffer(user_id=user_id)

    def user_ids(self):
        with self._registry_lock:
            return sorted(self._buffers)

    def restore(self, user_id, buffer):
        """Puts back a buffer captured before a failed handoff"""
        with self.user_lock(user_id):
            self._set(user_id, buffer)

    def _set(self, user_id, buffer):
        with self._registry_lock:
            self._buffers[user_id] = buffer

    def _empty(self, user_id):
        return MessageBuffer(user_id=user_id)

    def append_message(self, user_id, msg):
        """Adds a message to the user's buffer, cutting a segment when the trigger fires.

        On a semantic boundary the prior buffer becomes the segment and the message
        opens the next buffer. When the message fills the buffer, the segment includes
        it and the next buffer starts empty. On error the buffer is unchanged.

        Returns:
            SegmentationOutcome: what happened
        """
        with self.user_lock(user_id):
            buffer = self.buffer(user_id)
            extended = buffer.append(msg)
            if buffer.created_at is None:
                extended = MessageBuffer(user_id, extended.messages, self.clock.now(msg.timestamp))
            decision = detect_boundary(msg, buffer, self.provider, self.cfg)
            triggered, cause = should_trigger(decision, len(extended), self.cfg)

            if cause == TriggerCause.BUFFER_FULL:
                segment = extended.messages
                self._set(user_id, self._empty(user_id))
            elif cause == TriggerCause.SEMANTIC_BOUNDARY:
                segment = buffer.messages
                self._set(user_id, MessageBuffer(user_id, (msg,), self.clock.now(msg.timestamp)))
            else:
                segment = None
                self._set(user_id, extended)

            if triggered:
                logger.info(f"[{user_id}] Segment of {len(segment)} messages cut ({cause})")
            return SegmentationOutcome(
                triggered=triggered, segment=segment, decision=decision, trigger_cause=cause
            )

    def flush_session(self, user_id):
        """Emits whatever is buffered as a session_end segment"""
        with self.user_lock(user_id):
            buffer = self.buffer(user_id)
            if not buffer.messages:
                return SegmentationOutcome(triggered=False)
            self._set(user_id, self._empty(user_id))
            logger.info(f"[{user_id}] Segment of {len(buffer)} messages cut (session end)")
            return SegmentationOutcome(
                triggered=True, segment=buffer.messages, trigger_cause=TriggerCause.SESSION_END
            )
