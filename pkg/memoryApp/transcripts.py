"""Transcript and evaluation-case files, and converters from benchmark formats.

A transcript file is::

    {"conversation_id": "conv-1",
     "sessions": [{"session_id": "s1",
                   "messages": [{"role": "user", "content": "...", "timestamp": "2023-06-15T10:00:00Z"}]}]}

An evaluation-case file is a list (or {"cases": [...]}) of
{"question", "gold_answer", "category"?, "user_id"?}.
"""
import json
import logging
import re
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path

from dateutil import parser as date_parser
from django.core.exceptions import ValidationError

from .models import Message, Role, format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

LOCOMO_CATEGORIES = {
    1: "multi-hop",
    2: "temporal-reasoning",
    3: "open-domain",
    4: "single-hop",
}
LOCOMO_ADVERSARIAL = 5


@dataclass(frozen=True)
class Session:
    session_id: str
    messages: tuple

    def to_dict(self):
        return {"session_id": self.session_id, "messages": [m.to_dict() for m in self.messages]}


@dataclass(frozen=True)
class TranscriptFile:
    conversation_id: str
    sessions: tuple

    @property
    def messages(self):
        return [message for session in self.sessions for message in session.messages]

    def clean(self):
        """Sessions must follow each other in time, and messages within a session too"""
        previous = None
        for session in self.sessions:
            for message in session.messages:
                if previous is not None and message.timestamp < previous.timestamp:
                    raise ValidationError(
                        f"Session {session.session_id} is out of chronological order "
                        f"at {format_timestamp(message.timestamp)}"
                    )
                previous = message

    def to_dict(self):
        return {
            "conversation_id": self.conversation_id,
            "sessions": [s.to_dict() for s in self.sessions],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            conversation_id = str(data["conversation_id"])
            sessions = tuple(
                Session(
                    session_id=str(session.get("session_id", index + 1)),
                    messages=tuple(Message.from_dict(m) for m in session["messages"]),
                )
                for index, session in enumerate(data["sessions"])
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"Malformed transcript: {exc}")
        transcript = cls(conversation_id=conversation_id, sessions=sessions)
        transcript.clean()
        return transcript


@dataclass(frozen=True)
class EvalCase:
    question: str
    gold_answer: str
    category: str = None
    user_id: str = None

    def __post_init__(self):
        if not isinstance(self.question, str) or not self.question.strip():
            raise ValidationError("Evaluation case question is empty")
        if not isinstance(self.gold_answer, str) or not self.gold_answer.strip():
            raise ValidationError("Evaluation case gold answer is empty")

    def to_dict(self):
        data = {"question": self.question, "gold_answer": self.gold_answer, "category": self.category}
        if self.user_id is not None:
            data["user_id"] = self.user_id
        return data

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                question=data["question"],
                gold_answer=str(data["gold_answer"]),
                category=data.get("category"),
                user_id=data.get("user_id"),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"Malformed evaluation case: {exc}")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except ValueError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")


def load_transcript(path):
    return TranscriptFile.from_dict(_read_json(path))


def load_cases(path):
    data = _read_json(path)
    if isinstance(data, dict):
        data = data.get("cases", [])
    return [EvalCase.from_dict(case) for case in data]


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
        f.write("\n")


def _parse_loose_date(value):
    # Benchmark dates look like "1:56 pm on 8 May, 2023" or "2023/05/20 (Sat) 02:21"
    value = re.sub(r"\([A-Za-z]{3}\)", " ", str(value))
    try:
        return parse_timestamp(date_parser.parse(value, fuzzy=True))
    except (ValueError, OverflowError) as exc:
        raise ValidationError(f"Unparseable benchmark date {value!r}: {exc}")


def _sessions_in_order(sessions):
    return tuple(sorted(sessions, key=lambda s: s.messages[0].timestamp))


def convert_locomo(sample):
    """Converts one LoCoMo sample into a transcript and its evaluation cases.

    The first speaker becomes the user and the second the assistant; speaker names
    stay as a prefix of the content. Turns of a session are spaced one second apart
    from the session date. Adversarial questions are skipped.

    Returns:
        tuple: (TranscriptFile, list of EvalCase)
    """
    conversation = sample["conversation"]
    speaker_a = conversation.get("speaker_a")
    conversation_id = str(sample.get("sample_id", "locomo"))
    sessions = []
    index = 1
    while f"session_{index}" in conversation:
        turns = conversation[f"session_{index}"]
        start = _parse_loose_date(conversation[f"session_{index}_date_time"])
        messages = []
        for offset, turn in enumerate(turns):
            text = turn.get("text", "")
            if turn.get("blip_caption"):
                text = f"{text} [shares an image: {turn['blip_caption']}]"
            if not text.strip():
                continue
            messages.append(
                Message.create(
                    Role.USER if turn["speaker"] == speaker_a else Role.ASSISTANT,
                    f"{turn['speaker']}: {text}",
                    start + timedelta(seconds=offset),
                )
            )
        if messages:
            sessions.append(Session(session_id=f"session_{index}", messages=tuple(messages)))
        index += 1

    cases = []
    for qa in sample.get("qa", []):
        category = qa.get("category")
        if category == LOCOMO_ADVERSARIAL or "answer" not in qa:
            continue
        cases.append(
            EvalCase(
                question=qa["question"],
                gold_answer=str(qa["answer"]),
                category=LOCOMO_CATEGORIES.get(category, str(category)),
                user_id=conversation_id,
            )
        )
    transcript = TranscriptFile(conversation_id=conversation_id, sessions=_sessions_in_order(sessions))
    transcript.clean()
    return transcript, cases


def convert_longmemeval(item):
    """Converts one LongMemEval item: every haystack session at its date, one case"""
    conversation_id = str(item["question_id"])
    sessions = []
    for session_id, date, turns in zip(
        item["haystack_session_ids"], item["haystack_dates"], item["haystack_sessions"]
    ):
        start = _parse_loose_date(date)
        messages = tuple(
            Message.create(turn["role"], turn["content"], start + timedelta(seconds=offset))
            for offset, turn in enumerate(turns)
            if turn.get("content", "").strip() and turn.get("role") in Role.values
        )
        if messages:
            sessions.append(Session(session_id=str(session_id), messages=messages))
    case = EvalCase(
        question=item["question"],
        gold_answer=str(item["answer"]),
        category=item.get("question_type"),
        user_id=conversation_id,
    )
    transcript = TranscriptFile(conversation_id=conversation_id, sessions=_sessions_in_order(sessions))
    transcript.clean()
    return transcript, [case]


CONVERTERS = {
    "locomo": convert_locomo,
    "longmemeval": convert_longmemeval,
}


def convert_file(input_path, output_dir, benchmark):
    """Converts a benchmark file into <id>.transcript.json and <id>.cases.json pairs.

    Returns:
        list: conversation ids written
    """
    if benchmark not in CONVERTERS:
        raise ValidationError(f"Unknown benchmark format: {benchmark!r}")
    data = _read_json(input_path)
    if isinstance(data, dict):
        data = [data]
    output_dir = Path(output_dir)
    written = []
    for sample in data:
        try:
            transcript, cases = CONVERTERS[benchmark](sample)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"Malformed {benchmark} sample: {exc}")
        write_json(output_dir / f"{transcript.conversation_id}.transcript.json", transcript.to_dict())
        write_json(output_dir / f"{transcript.conversation_id}.cases.json", [c.to_dict() for c in cases])
        written.append(transcript.conversation_id)
        logger.info(f"[{transcript.conversation_id}] Converted {len(transcript.messages)} messages, {len(cases)} cases")
    return written
