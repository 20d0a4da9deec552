"""Uniform access to chat completions and embeddings.

Two backends share the same retry policy and call log: ``OpenAIProvider``
talks to any OpenAI-compatible HTTP server, ``ScriptedProvider`` answers
from declarative rules so that whole runs replay bit for bit.
"""
import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import openai
from django.conf import settings
from django.core.exceptions import ValidationError
from django.db import models
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .exceptions import MemoryEngineError, ResponseParseError, ScriptingError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDING_DIMENSION = 8
# Returned by the "malformed" fault: never valid JSON
MALFORMED_RESPONSE = '{"is_boundary": tru'
# Call log tag of embedding requests, which carry no chat prompts
EMBEDDING_TAG = "embedding"


class RoleTag(models.TextChoices):
    """Which pipeline function a chat call carries"""

    BOUNDARY_DETECTOR = "boundary_detector"
    EPISODE_GENERATOR = "episode_generator"
    EPISODE_PREDICTOR = "episode_predictor"
    KNOWLEDGE_DISTILLER = "knowledge_distiller"
    ANSWERER = "answerer"
    JUDGE = "judge"


class ResponseFormat(models.TextChoices):
    FREE_TEXT = "free_text"
    JSON_OBJECT = "json_object"
    JSON_ARRAY = "json_array"


class FailureMode(models.TextChoices):
    TIMEOUT = "timeout"
    MALFORMED = "malformed"
    TRANSPORT_ERROR = "transport_error"


DEFAULT_TEMPERATURES = {
    RoleTag.BOUNDARY_DETECTOR: 0.0,
    RoleTag.EPISODE_GENERATOR: 0.3,
    RoleTag.EPISODE_PREDICTOR: 0.7,
    RoleTag.KNOWLEDGE_DISTILLER: 0.0,
    RoleTag.ANSWERER: 0.0,
    RoleTag.JUDGE: 0.0,
}


def digest(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _vector_digest(vector):
    return hashlib.sha256(np.asarray(vector, dtype="<f4").tobytes()).hexdigest()[:12]


@dataclass(frozen=True)
class ChatRequest:
    role_tag: str
    system_prompt: str
    user_prompt: str
    response_format: str = ResponseFormat.FREE_TEXT
    # What the call is about (new message, title, segment, question); scripted rules match on it
    focus: str = ""

    def __post_init__(self):
        if self.role_tag not in RoleTag.values:
            raise ValidationError(f"Unknown role tag: {self.role_tag!r}")
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise ValidationError("Chat prompts must be non-empty")

    @property
    def prompt_digest(self):
        return digest(self.system_prompt + "\n" + self.user_prompt)


@dataclass(frozen=True)
class CallRecord:
    role_tag: str
    prompt_digest: str
    response_digest: str
    request: ChatRequest = None
    response: str = None
    error: str = None


class CallLog:
    """Every outbound attempt, chat and embedding, in order"""

    def __init__(self):
        self._records = []
        self._lock = threading.Lock()

    def record(self, request, response=None, error=None):
        entry = CallRecord(
            role_tag=request.role_tag,
            prompt_digest=request.prompt_digest,
            response_digest=digest(response) if response is not None else "",
            request=request,
            response=response,
            error=str(error) if error is not None else None,
        )
        with self._lock:
            self._records.append(entry)
        return entry

    def record_embedding(self, text, vector=None, error=None):
        entry = CallRecord(
            role_tag=EMBEDDING_TAG,
            prompt_digest=digest(text),
            response_digest=_vector_digest(vector) if vector is not None else "",
            error=str(error) if error is not None else None,
        )
        with self._lock:
            self._records.append(entry)
        return entry

    def entries(self, role_tag=None):
        with self._lock:
            records = list(self._records)
        if role_tag is None:
            return records
        return [r for r in records if r.role_tag == role_tag]

    def clear(self):
        with self._lock:
            self._records.clear()

    def __len__(self):
        with self._lock:
            return len(self._records)


def extract_json(text, expected="object"):
    """Finds and decodes the first balanced JSON object (or array) in a model response.

    Surrounding prose and code fences are ignored. Candidates that are balanced but
    not valid JSON are skipped.

    Args:
        text (str): raw model output
        expected (str): "object" or "array"

    Raises:
        ResponseParseError: if no candidate decodes to the expected type

    Returns:
        dict or list: decoded value
    """
    opener = "{" if expected == "object" else "["
    wanted = dict if expected == "object" else list
    text = text or ""
    start = text.find(opener)
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for index in range(start, len(text)):
            char = text[index]
            if in_string:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == '"':
                    in_string = False
                continue
            if char == '"':
                in_string = True
            elif char in "{[":
                depth += 1
            elif char in "}]":
                depth -= 1
                if depth == 0:
                    try:
                        value = json.loads(text[start : index + 1])
                    except ValueError:
                        break
                    if isinstance(value, wanted):
                        return value
                    break
        start = text.find(opener, start + 1)
    raise ResponseParseError(f"No JSON {expected} found in response ({digest(text)})")


def hash_embedding(text, dimension=DEFAULT_EMBEDDING_DIMENSION):
    """Deterministic unit vector derived from the SHAKE-256 digest of the text"""
    raw = hashlib.shake_256(text.encode("utf-8")).digest(4 * dimension)
    vector = np.frombuffer(raw, dtype="<u4").astype(np.float64) / 2 ** 31 - 1.0
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        vector[0] = 1.0
        norm = 1.0
    return vector / norm


class LLMProvider(ABC):
    """Base backend: retries transport errors with exponential backoff and logs every attempt"""

    deterministic = False

    def __init__(self, attempts=3, backoff=0.5, call_log=None):
        self.attempts = attempts
        self.backoff = backoff
        self.call_log = call_log if call_log is not None else CallLog()

    def _retrying(self):
        return Retrying(
            stop=stop_after_attempt(self.attempts),
            wait=wait_exponential(multiplier=self.backoff, max=30),
            retry=retry_if_exception_type(TransportError),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

    def chat(self, request):
        """Sends one chat request and returns the raw model text.

        Args:
            request (ChatRequest): prompts and role tag

        Raises:
            TransportError: once every attempt failed
            ScriptingError: strict scripted backend without a matching rule

        Returns:
            str: raw model text, unparsed
        """
        try:
            return self._retrying()(self._attempt, request)
        except TransportError:
            logger.error(
                f"[{request.role_tag}] Provider unreachable after {self.attempts} attempts"
            )
            raise

    def _attempt(self, request):
        try:
            response = self._complete(request)
        except MemoryEngineError as exc:
            self.call_log.record(request, error=exc)
            raise
        self.call_log.record(request, response)
        return response

    def embed(self, text):
        """Embeds a non-empty text into a vector of the backend's fixed dimension"""
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("Cannot embed empty text")
        return np.asarray(self._retrying()(self._embed_attempt, text), dtype=np.float64)

    def _embed_attempt(self, text):
        try:
            vector = self._embed(text)
        except MemoryEngineError as exc:
            self.call_log.record_embedding(text, error=exc)
            raise
        self.call_log.record_embedding(text, vector)
        return vector

    @abstractmethod
    def _complete(self, request):
        """Returns the model text for a request or raises TransportError"""

    @abstractmethod
    def _embed(self, text):
        """Returns the embedding of a text or raises TransportError"""


@dataclass
class ScriptedRule:
    """One declarative answer of the scripted backend.

    A rule matches when the role tag is equal and every matcher it declares holds:
    ``contains`` is a substring of the request focus (the user prompt when the request
    has no focus) and ``call`` is the 1-based position of the call among the calls
    with the same role tag. Failure rules fire once unless ``times`` says otherwise.
    """

    role_tag: str
    response: str = ""
    contains: str = None
    call: int = None
    failure_mode: str = None
    times: int = None
    delay: float = 0.0
    fired: int = 0

    def __post_init__(self):
        if self.role_tag not in RoleTag.values:
            raise ValidationError(f"Unknown role tag in scripted rule: {self.role_tag!r}")
        if self.failure_mode is not None and self.failure_mode not in FailureMode.values:
            raise ValidationError(f"Unknown failure mode: {self.failure_mode!r}")
        if self.times is None and self.failure_mode is not None:
            self.times = 1

    def matches(self, request, position):
        if request.role_tag != self.role_tag:
            return False
        if self.times is not None and self.fired >= self.times:
            return False
        if self.contains is not None and self.contains not in (request.focus or request.user_prompt):
            return False
        if self.call is not None and self.call != position:
            return False
        return True

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "response_json" in data:
            data["response"] = json.dumps(data.pop("response_json"))
        known = {f.name for f in fields(cls)} - {"fired"}
        for key in data:
            if key not in known:
                raise ValidationError(f"Unknown scripted rule field: {key}")
        return cls(**data)


class ScriptedProvider(LLMProvider):
    """Deterministic backend for tests and replays.

    Rules are consulted in declaration order and the first match wins. Matching is
    serialized so that sequence-position rules replay identically.
    """

    deterministic = True

    def __init__(self, rules=(), strict=True, dimension=DEFAULT_EMBEDDING_DIMENSION,
                 attempts=3, backoff=0.0, call_log=None):
        super().__init__(attempts=attempts, backoff=backoff, call_log=call_log)
        self.rules = list(rules)
        self.strict = strict
        self.dimension = dimension
        self._positions = {}
        self._lock = threading.Lock()

    @classmethod
    def from_dict(cls, data, **kwargs):
        """Builds the backend from a script document:
        {"strict": true, "embedding_dimension": 8, "rules": [{...}, ...]}
        """
        kwargs.setdefault("strict", data.get("strict", True))
        kwargs.setdefault("dimension", data.get("embedding_dimension", DEFAULT_EMBEDDING_DIMENSION))
        rules = [ScriptedRule.from_dict(rule) for rule in data.get("rules", [])]
        return cls(rules=rules, **kwargs)

    @classmethod
    def from_file(cls, path, **kwargs):
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"Unreadable script file {path}: {exc}")
        return cls.from_dict(data, **kwargs)

    def add_rule(self, role_tag, response="", **options):
        rule = ScriptedRule(role_tag=role_tag, response=response, **options)
        with self._lock:
            self.rules.append(rule)
        return rule

    def _complete(self, request):
        with self._lock:
            position = self._positions.get(request.role_tag, 0) + 1
            self._positions[request.role_tag] = position
            rule = next((r for r in self.rules if r.matches(request, position)), None)
            if rule is not None:
                rule.fired += 1
        if rule is None:
            if self.strict:
                raise ScriptingError(request.role_tag, request.prompt_digest)
            return ""
        if rule.delay:
            time.sleep(rule.delay)
        if rule.failure_mode == FailureMode.TIMEOUT:
            raise TransportError(f"Scripted timeout for {request.role_tag}")
        if rule.failure_mode == FailureMode.TRANSPORT_ERROR:
            raise TransportError(f"Scripted transport error for {request.role_tag}")
        if rule.failure_mode == FailureMode.MALFORMED:
            return MALFORMED_RESPONSE
        return rule.response

    def _embed(self, text):
        return hash_embedding(text, self.dimension)


class OpenAIProvider(LLMProvider):
    """Backend for OpenAI-compatible chat-completions and embeddings servers"""

    def __init__(self, base_url, api_key, model, embedding_model, role_models=None,
                 temperatures=None, timeout=60.0, attempts=3, backoff=0.5, call_log=None):
        super().__init__(attempts=attempts, backoff=backoff, call_log=call_log)
        if not api_key:
            logger.warning("No API key configured for the HTTP provider")
        # Retries are ours, not the client's
        self.client = openai.OpenAI(
            api_key=api_key or "not-set", base_url=base_url, timeout=timeout, max_retries=0
        )
        self.model = model
        self.embedding_model = embedding_model
        self.role_models = dict(role_models or {})
        self.temperatures = {**DEFAULT_TEMPERATURES, **(temperatures or {})}

    def _complete(self, request):
        try:
            response = self.client.chat.completions.create(
                model=self.role_models.get(request.role_tag, self.model),
                temperature=self.temperatures.get(request.role_tag, 0.0),
                messages=[
                    {"role": "system", "content": request.system_prompt},
                    {"role": "user", "content": request.user_prompt},
                ],
            )
        except (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError) as exc:
            raise TransportError(f"{request.role_tag}: {exc}") from exc
        except openai.APIStatusError as exc:
            raise MemoryEngineError(
                f"{request.role_tag}: provider rejected the request ({exc.status_code})"
            ) from exc
        return response.choices[0].message.content or ""

    def _embed(self, text):
        try:
            response = self.client.embeddings.create(model=self.embedding_model, input=text)
        except (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError) as exc:
            raise TransportError(f"embedding: {exc}") from exc
        except openai.APIStatusError as exc:
            raise MemoryEngineError(
                f"embedding: provider rejected the request ({exc.status_code})"
            ) from exc
        vector = np.asarray(response.data[0].embedding, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if not np.isfinite(norm) or norm == 0.0:
            raise ResponseParseError("embedding: provider returned a zero or non-finite vector")
        return vector / norm


def build_provider(name=None, script=None, base_url=None, model=None, timeout=None):
    """Creates the configured backend; explicit arguments win over settings.

    Args:
        name (str): "scripted" or "http"
        script (str): path of the script file for the scripted backend
        base_url (str): base URL of the OpenAI-compatible server
        model (str): chat model used for every role without its own model
        timeout (float): request timeout in seconds

    Returns:
        LLMProvider: ready backend
    """
    name = name or settings.MEMORY_PROVIDER
    if name == "scripted":
        script = script or settings.MEMORY_SCRIPT
        if not script:
            raise ValidationError("The scripted provider needs a script file")
        return ScriptedProvider.from_file(Path(script), attempts=settings.MEMORY_LLM_ATTEMPTS)
    if name == "http":
        return OpenAIProvider(
            base_url=base_url or settings.MEMORY_LLM_BASE_URL,
            api_key=os.environ.get(settings.MEMORY_LLM_API_KEY_ENV),
            model=model or settings.MEMORY_LLM_MODEL,
            embedding_model=settings.MEMORY_EMBEDDING_MODEL,
            role_models=settings.MEMORY_LLM_ROLE_MODELS,
            temperatures=settings.MEMORY_LLM_TEMPERATURES,
            timeout=timeout or settings.MEMORY_LLM_TIMEOUT,
            attempts=settings.MEMORY_LLM_ATTEMPTS,
            backoff=settings.MEMORY_LLM_BACKOFF,
        )
    raise ValidationError(f"Unknown provider: {name!r}")
