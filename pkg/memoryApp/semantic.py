"""Semantic learning: the predict, calibrate and integrate cycle.

For every stored episode the predictor forecasts its content from the title and
the knowledge already held; the distiller compares that forecast with the raw
conversation and states what was missed; the new statements are added to the
user's semantic store. Cycles run in background threads, one at a time per user.
"""
import logging
import threading
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from django.core.exceptions import ValidationError
from django.db import models

from .exceptions import DrainTimeout, MemoryEngineError, ResponseParseError
from .llm import ChatRequest, ResponseFormat, RoleTag, extract_json
from .models import FACT_PREFIX, ReplayClock, SemanticFact, format_timestamp, render_messages
from .prompts import render_prompt
from .retrieval import retrieve

logger = logging.getLogger(__name__)


class CycleStatus(models.TextChoices):
    QUEUED = "queued"
    PREDICTED = "predicted"
    CALIBRATED = "calibrated"
    INTEGRATED = "integrated"
    FAILED = "failed"


STATUS_ORDER = [CycleStatus.QUEUED, CycleStatus.PREDICTED, CycleStatus.CALIBRATED, CycleStatus.INTEGRATED]
TERMINAL_STATUSES = {CycleStatus.INTEGRATED, CycleStatus.FAILED}


@dataclass
class LearningCycleRecord:
    """State of one learning cycle, keyed by the episode it learns from"""

    episode_id: str
    user_id: str
    retrieved_fact_ids: list = field(default_factory=list)
    predicted_content: str = ""
    distilled_statements: list = field(default_factory=list)
    fact_ids: list = field(default_factory=list)
    status: str = CycleStatus.QUEUED
    timestamps: dict = field(default_factory=dict)
    degraded: bool = False
    error: str = None

    @property
    def terminal(self):
        return self.status in TERMINAL_STATUSES

    def advance(self, status, at):
        """Moves to a later status; failed is terminal and transitions never go back"""
        if self.status == CycleStatus.FAILED:
            raise ValueError(f"Cycle {self.episode_id} already failed")
        if status != CycleStatus.FAILED and STATUS_ORDER.index(status) <= STATUS_ORDER.index(self.status):
            raise ValueError(f"Cycle {self.episode_id} cannot go from {self.status} to {status}")
        self.status = status
        self.timestamps[str(status)] = format_timestamp(at)

    def fail(self, error, at):
        self.error = str(error)
        self.advance(CycleStatus.FAILED, at)

    def to_dict(self):
        return {
            "episode_id": self.episode_id,
            "user_id": self.user_id,
            "retrieved_fact_ids": list(self.retrieved_fact_ids),
            "predicted_content": self.predicted_content,
            "distilled_statements": list(self.distilled_statements),
            "fact_ids": list(self.fact_ids),
            "status": str(self.status),
            "timestamps": dict(self.timestamps),
            "degraded": self.degraded,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            episode_id=data["episode_id"],
            user_id=data["user_id"],
            retrieved_fact_ids=list(data.get("retrieved_fact_ids", [])),
            predicted_content=data.get("predicted_content", ""),
            distilled_statements=list(data.get("distilled_statements", [])),
            fact_ids=list(data.get("fact_ids", [])),
            status=CycleStatus(data["status"]),
            timestamps=dict(data.get("timestamps", {})),
            degraded=bool(data.get("degraded", False)),
            error=data.get("error"),
        )


def retrieve_relevant(episode, fact_store, cfg):
    """Facts most similar to the episode, searched with its stored embedding"""
    hits = retrieve(
        episode.embedding,
        fact_store,
        cfg.semantic_retrieval_limit_for_learning,
        cfg.similarity_threshold,
    )
    return [fact_store.get(hit.item_id) for hit in hits]


def predict_episode(title, relevant, provider):
    """Forecasts the content of an episode from its title and the retrieved knowledge.

    Returns:
        str: the prediction, as plain text
    """
    if not isinstance(title, str) or not title.strip():
        raise ValidationError("Cannot predict an episode without a title")
    system_prompt, user_prompt = render_prompt(
        "episode_predictor",
        title=title,
        knowledge=[fact.statement for fact in relevant],
    )
    request = ChatRequest(
        role_tag=RoleTag.EPISODE_PREDICTOR,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.FREE_TEXT,
        focus=title,
    )
    return provider.chat(request).strip()


def _clean_statements(values):
    statements = []
    for value in values:
        if not isinstance(value, str):
            continue
        value = value.strip()
        if value and value not in statements:
            statements.append(value)
    return statements


def _ask_for_statements(request, provider, label):
    """Sends a request expecting a JSON array of statements; one retry on bad output.

    Returns:
        tuple: (statements, degraded)
    """
    for attempt in range(2):
        text = provider.chat(request)
        try:
            return _clean_statements(extract_json(text, "array")), False
        except ResponseParseError as exc:
            logger.warning(f"[{label}] Unparseable statement list (attempt {attempt + 1}): {exc}")
    return [], True


def _distill_request(predicted, segment):
    transcript = render_messages(segment)
    system_prompt, user_prompt = render_prompt(
        "knowledge_distiller", prediction=predicted, conversation=transcript
    )
    return ChatRequest(
        role_tag=RoleTag.KNOWLEDGE_DISTILLER,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.JSON_ARRAY,
        focus=transcript,
    )


def _extract_request(segment):
    transcript = render_messages(segment)
    system_prompt, user_prompt = render_prompt("direct_extraction", conversation=transcript)
    return ChatRequest(
        role_tag=RoleTag.KNOWLEDGE_DISTILLER,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.JSON_ARRAY,
        focus=transcript,
    )


def distill_gap(predicted, segment, provider):
    """Statements found in the raw conversation that the prediction missed.

    The distiller sees the original messages, never the episode narrative.

    Returns:
        list: statements, possibly empty
    """
    if not segment:
        raise ValidationError("Cannot distill from an empty segment")
    statements, _ = _ask_for_statements(_distill_request(predicted, segment), provider, "distiller")
    return statements


def extract_directly(segment, provider):
    """Every durable fact of the raw conversation, without prediction"""
    if not segment:
        raise ValidationError("Cannot extract from an empty segment")
    statements, _ = _ask_for_statements(_extract_request(segment), provider, "extraction")
    return statements


def integrate(statements, episode, embedder, memory, clock=None):
    """Embeds and stores new statements as facts linked to the episode.

    Exact duplicates (after trimming) of facts the user already holds are skipped.
    All statements are embedded before anything is stored, so an embedding failure
    stores nothing.

    Returns:
        list: the stored SemanticFacts
    """
    clock = clock or ReplayClock()
    fresh = []
    for statement in _clean_statements(statements):
        if not memory.has_statement(statement):
            fresh.append(statement)
    if not fresh:
        return []
    embeddings = [embedder.embed(statement) for statement in fresh]
    created_at = clock.now(episode.created_at)
    facts = [
        SemanticFact(
            id=memory.ids.new_id(FACT_PREFIX),
            user_id=episode.user_id,
            statement=statement,
            embedding=embedding,
            source_episode_id=episode.id,
            created_at=created_at,
        )
        for statement, embedding in zip(fresh, embeddings)
    ]
    memory.add_facts(facts)
    return facts


def run_learning_cycle(episode, segment, memory, provider, embedder, cfg, clock=None, record=None):
    """Runs retrieve and predict, then calibrate, then integrate, for one episode.

    A failing stage marks the cycle failed and leaves both stores as they were.

    Returns:
        LearningCycleRecord: the final state of the cycle
    """
    clock = clock or ReplayClock()
    record = record or LearningCycleRecord(episode_id=episode.id, user_id=episode.user_id)
    label = f"[{episode.user_id}][{episode.id}]"

    def now():
        return clock.now(episode.created_at)

    try:
        if cfg.direct_extraction:
            record.advance(CycleStatus.PREDICTED, now())
            statements, degraded = _ask_for_statements(_extract_request(segment), provider, label)
        else:
            relevant = retrieve_relevant(episode, memory.facts, cfg)
            record.retrieved_fact_ids = [fact.id for fact in relevant]
            record.predicted_content = predict_episode(episode.title, relevant, provider)
            record.advance(CycleStatus.PREDICTED, now())
            statements, degraded = _ask_for_statements(
                _distill_request(record.predicted_content, segment), provider, label
            )
        record.distilled_statements = statements
        record.degraded = degraded
        record.advance(CycleStatus.CALIBRATED, now())
        facts = integrate(statements, episode, embedder, memory, clock)
        record.fact_ids = [fact.id for fact in facts]
        record.advance(CycleStatus.INTEGRATED, now())
        logger.info(f"{label} Learning cycle integrated {len(facts)} facts")
    except (MemoryEngineError, ValidationError) as exc:
        record.fail(exc, now())
        logger.error(f"{label} Learning cycle failed: {exc}")

    try:
        memory.add_cycle(record)
    except MemoryEngineError as exc:
        logger.error(f"{label} Could not persist the cycle record: {exc}")
    return record


@dataclass
class _Job:
    record: LearningCycleRecord
    episode: object
    segment: tuple
    memory: object


class LearningPipeline:
    """Runs learning cycles in a thread pool: one cycle in flight per user, users in parallel"""

    def __init__(self, provider, embedder, cfg, clock=None, max_workers=4):
        self.provider = provider
        self.embedder = embedder
        self.cfg = cfg
        self.clock = clock or ReplayClock()
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="learning")
        self._queues = defaultdict(deque)
        self._active = set()
        self._records = {}
        self._condition = threading.Condition()

    def submit(self, episode, segment, memory):
        """Queues the cycle of a freshly stored episode and returns its record"""
        record = LearningCycleRecord(episode_id=episode.id, user_id=episode.user_id)
        record.timestamps[str(CycleStatus.QUEUED)] = format_timestamp(self.clock.now(episode.created_at))
        with self._condition:
            self._records[episode.id] = record
            self._queues[episode.user_id].append(_Job(record, episode, tuple(segment), memory))
            if episode.user_id not in self._active:
                self._active.add(episode.user_id)
                self._executor.submit(self._work, episode.user_id)
        return record

    def _work(self, user_id):
        while True:
            with self._condition:
                queue = self._queues[user_id]
                if not queue:
                    self._active.discard(user_id)
                    self._condition.notify_all()
                    return
                job = queue.popleft()
            try:
                run_learning_cycle(
                    job.episode, job.segment, job.memory, self.provider, self.embedder,
                    self.cfg, clock=self.clock, record=job.record,
                )
            except Exception as exc:
                logger.exception(f"[{user_id}][{job.episode.id}] Unexpected learning cycle error")
                if not job.record.terminal:
                    job.record.fail(exc, self.clock.now(job.episode.created_at))
            with self._condition:
                self._condition.notify_all()

    def restore(self, records):
        """Registers cycle records read back from disk, without running them"""
        with self._condition:
            for record in records:
                self._records.setdefault(record.episode_id, record)

    def record(self, episode_id):
        with self._condition:
            return self._records.get(episode_id)

    def records(self, user_id=None):
        with self._condition:
            return [r for r in self._records.values() if user_id is None or r.user_id == user_id]

    def pending(self, user_id=None):
        """Episode ids of cycles not yet integrated or failed"""
        return [r.episode_id for r in self.records(user_id) if not r.terminal]

    def drain(self, user_id=None, timeout=None):
        """Waits until every queued cycle (of one user, or of all) is terminal.

        Raises:
            DrainTimeout: listing the cycles still pending when the timeout expires
        """
        with self._condition:
            drained = self._condition.wait_for(lambda: not self.pending(user_id), timeout=timeout)
            if not drained:
                stuck = self.pending(user_id)
                logger.error(f"[{user_id or '*'}] Drain timed out with {len(stuck)} pending cycles")
                raise DrainTimeout(stuck, timeout)

    def shutdown(self, wait=True):
        self._executor.shutdown(wait=wait)
