"""The memory engine: segmentation, episodes, learning and retrieval for every user.

The HTTP views and the management commands share one engine per process
(``get_engine``), built from settings.
"""
import logging
import threading
from dataclasses import dataclass, field

from django.conf import settings

from .episodic import generate_episode, store_episode
from .exceptions import AnswerError, IngestError, MemoryEngineError
from .llm import ChatRequest, ResponseFormat, RoleTag, build_provider
from .models import EngineConfig, RandomIds, ReplayClock, SequentialIds, SystemClock, validate_config
from .persistence import UserMemory, load, snapshot, validate_user_id
from .prompts import render_prompt
from .retrieval import assemble_context
from .segmentation import Segmenter
from .semantic import CycleStatus, LearningPipeline

logger = logging.getLogger(__name__)

SETTINGS_CONFIG = {
    "boundary_confidence_threshold": "MEMORY_BOUNDARY_THRESHOLD",
    "max_buffer_size": "MEMORY_MAX_BUFFER_SIZE",
    "similarity_threshold": "MEMORY_SIMILARITY_THRESHOLD",
    "top_k_episodes": "MEMORY_TOP_K",
    "semantic_multiplier": "MEMORY_SEMANTIC_MULTIPLIER",
    "raw_text_episode_count": "MEMORY_RAW_TEXT_EPISODES",
    "semantic_retrieval_limit_for_learning": "MEMORY_LEARNING_LIMIT",
    "detector_context_messages": "MEMORY_DETECTOR_CONTEXT_MESSAGES",
    "detector_token_budget": "MEMORY_DETECTOR_TOKEN_BUDGET",
    "episodic_retrieval": "MEMORY_EPISODIC_RETRIEVAL",
    "semantic_retrieval": "MEMORY_SEMANTIC_RETRIEVAL",
    "direct_extraction": "MEMORY_DIRECT_EXTRACTION",
}


def config_from_settings(**overrides):
    """EngineConfig from the MEMORY_* settings, with non-None overrides applied"""
    values = {name: getattr(settings, key) for name, key in SETTINGS_CONFIG.items() if hasattr(settings, key)}
    return validate_config(EngineConfig.from_dict(values).override(**overrides))


@dataclass(frozen=True)
class AppendResult:
    """Segmentation outcome of one call, plus the episode stored from the cut segment"""

    outcome: object
    episode: object = None
    # Narrated by the transcript fallback, not the generator
    degraded: bool = False

    def to_dict(self):
        data = self.outcome.to_dict()
        data["segment_size"] = len(self.outcome.segment) if self.outcome.segment else 0
        data["episode_id"] = self.episode.id if self.episode is not None else None
        data["degraded_episode"] = self.degraded
        return data


@dataclass(frozen=True)
class AnswerResult:
    answer: str
    context: object

    def to_dict(self):
        return {"answer": self.answer, "context": self.context.to_dict()}


@dataclass
class IngestReport:
    user_id: str = ""
    messages: int = 0
    sessions: int = 0
    episodes: int = 0
    facts: int = 0
    degraded_episodes: int = 0
    failed_cycles: int = 0
    degraded_cycles: int = 0
    episode_ids: list = field(default_factory=list)

    def to_dict(self):
        return {
            "user_id": self.user_id,
            "messages": self.messages,
            "sessions": self.sessions,
            "episodes": self.episodes,
            "degraded_episodes": self.degraded_episodes,
            "facts": self.facts,
            "failed_cycles": self.failed_cycles,
            "degraded_cycles": self.degraded_cycles,
        }


class MemoryEngine:
    """Per-user conversational memory.

    Args:
        provider (LLMProvider): chat backend for every pipeline function
        cfg (EngineConfig): engine parameters, settings defaults when None
        store_root (str or Path): persistence root; in-memory only when None
        embedder (LLMProvider): embedding backend, the provider when None
        answer_provider (LLMProvider): backend for answers, the provider when None
        deterministic (bool): replay ids and timestamps; follows the provider when None
        max_workers (int): learning threads
    """

    def __init__(self, provider, cfg=None, store_root=None, embedder=None, answer_provider=None,
                 deterministic=None, max_workers=4):
        self.cfg = validate_config(cfg or config_from_settings())
        self.provider = provider
        self.embedder = embedder or provider
        self.answer_provider = answer_provider or provider
        self.deterministic = provider.deterministic if deterministic is None else deterministic
        self.clock = ReplayClock() if self.deterministic else SystemClock()
        self.store_root = store_root
        self._users_lock = threading.Lock()
        if store_root is not None:
            loaded = load(store_root, deterministic=self.deterministic, config_hash=self.cfg.digest())
            self.repository = loaded.repository
            self._users = loaded.users
        else:
            self.repository = None
            self._users = {}
        self.segmenter = Segmenter(provider, self.cfg, self.clock)
        self.pipeline = LearningPipeline(provider, self.embedder, self.cfg, self.clock, max_workers)
        self._resume_learning()

    def _resume_learning(self):
        """Requeues the cycles of loaded episodes that never reached a final status"""
        for user_id, memory in sorted(self._users.items()):
            self.pipeline.restore(memory.cycles)
            finished = {record.episode_id for record in memory.cycles if record.terminal}
            unlearned = sorted(
                (e for e in memory.episodes.snapshot() if e.id not in finished),
                key=lambda e: (e.created_at, e.id),
            )
            for episode in unlearned:
                self.pipeline.submit(episode, episode.source_messages, memory)
            if unlearned:
                logger.info(f"[{user_id}] Resumed {len(unlearned)} unfinished learning cycles")

    def _new_ids(self):
        return SequentialIds() if self.deterministic else RandomIds()

    def memory(self, user_id, create=True):
        """The user's stores; created on first write"""
        with self._users_lock:
            memory = self._users.get(user_id)
            if memory is None and create:
                dimension = self.repository.manifest.embedding_dimension if self.repository else None
                memory = UserMemory(user_id, dimension=dimension, repository=self.repository, ids=self._new_ids())
                self._users[user_id] = memory
            return memory

    def has_user(self, user_id):
        with self._users_lock:
            if user_id in self._users:
                return True
        return len(self.segmenter.buffer(user_id)) > 0

    def user_ids(self):
        with self._users_lock:
            known = set(self._users)
        return sorted(known | set(self.segmenter.user_ids()))

    def _handoff(self, user_id, segment):
        memory = self.memory(user_id)
        draft = generate_episode(segment, self.provider, user_id)
        episode = store_episode(draft, segment, user_id, self.embedder, memory, self.clock)
        self.pipeline.submit(episode, segment, memory)
        return episode, draft.degraded

    def _segment(self, user_id, cut):
        validate_user_id(user_id)
        with self.segmenter.user_lock(user_id):
            previous = self.segmenter.buffer(user_id)
            outcome = cut()
            episode, degraded = None, False
            if outcome.triggered:
                try:
                    episode, degraded = self._handoff(user_id, outcome.segment)
                except Exception:
                    self.segmenter.restore(user_id, previous)
                    raise
            return AppendResult(outcome=outcome, episode=episode, degraded=degraded)

    def append_message(self, user_id, message):
        """Feeds one message to the user's segmenter; a cut segment becomes an episode
        right away and its learning cycle is queued.

        Returns:
            AppendResult: outcome and stored episode (if any)
        """
        return self._segment(user_id, lambda: self.segmenter.append_message(user_id, message))

    def flush_session(self, user_id):
        """Closes the user's session: whatever is buffered becomes an episode"""
        return self._segment(user_id, lambda: self.segmenter.flush_session(user_id))

    def drain(self, user_id=None, timeout=None):
        self.pipeline.drain(user_id, timeout if timeout is not None else settings.MEMORY_DRAIN_TIMEOUT)

    def config_for(self, top_k=None):
        if top_k is None:
            return self.cfg
        return validate_config(
            self.cfg.override(
                top_k_episodes=top_k,
                raw_text_episode_count=min(self.cfg.raw_text_episode_count, top_k),
            )
        )

    def search(self, user_id, query, top_k=None):
        """Memory context for a query: ranked episodes and facts, rendered"""
        cfg = self.config_for(top_k)
        return assemble_context(query, user_id, self.memory(user_id, create=False), self.embedder, cfg)

    def answer(self, user_id, question, top_k=None, provider=None):
        """Answers a question from the user's memory context.

        Raises:
            AnswerError: carrying the assembled context when the answer provider fails

        Returns:
            AnswerResult: answer text and the context it was given
        """
        context = self.search(user_id, question, top_k)
        return self.respond(user_id, question, context, provider)

    def respond(self, user_id, question, context, provider=None):
        """Asks the answer provider, given an already assembled context"""
        system_prompt, user_prompt = render_prompt("answerer", context=context.rendered, question=question)
        request = ChatRequest(
            role_tag=RoleTag.ANSWERER,
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            response_format=ResponseFormat.FREE_TEXT,
            focus=question,
        )
        try:
            text = (provider or self.answer_provider).chat(request)
        except MemoryEngineError as exc:
            logger.error(f"[{user_id}] Answer failed: {exc}")
            raise AnswerError(f"Answer failed: {exc}", context) from exc
        return AnswerResult(answer=text.strip(), context=context)

    def episodes(self, user_id):
        memory = self.memory(user_id, create=False)
        return list(memory.episodes.snapshot()) if memory else []

    def facts(self, user_id):
        memory = self.memory(user_id, create=False)
        return list(memory.facts.snapshot()) if memory else []

    def cycles(self, user_id=None):
        return self.pipeline.records(user_id)

    def snapshot(self, destination, timeout=None):
        """Drains the learning pipeline and copies the store root"""
        if self.store_root is None:
            raise MemoryEngineError("Snapshots need a persistent store")
        self.drain(timeout=timeout)
        return snapshot(self.store_root, destination)

    def close(self, wait=True):
        self.pipeline.shutdown(wait=wait)


def ingest(transcript, engine, user_id=None, timeout=None):
    """Streams a transcript through the engine, session by session, then drains.

    Args:
        transcript (TranscriptFile): conversation to ingest
        engine (MemoryEngine): target engine
        user_id (str): owner of the memories, the conversation id when None
        timeout (float): drain timeout in seconds

    Raises:
        IngestError: carrying the counts reached before an engine failure

    Returns:
        IngestReport: counts of messages, sessions, episodes, facts and failed cycles
    """
    user_id = user_id or transcript.conversation_id
    report = IngestReport(user_id=user_id)

    def count(result):
        if result.episode is not None:
            report.episodes += 1
            report.episode_ids.append(result.episode.id)
            report.degraded_episodes += result.degraded

    try:
        for session in transcript.sessions:
            for message in session.messages:
                count(engine.append_message(user_id, message))
                report.messages += 1
            count(engine.flush_session(user_id))
            report.sessions += 1
        engine.drain(user_id, timeout)
    except MemoryEngineError as exc:
        logger.error(f"[{user_id}] Ingest aborted after {report.messages} messages: {exc}")
        raise IngestError(f"Ingest aborted: {exc}", report) from exc

    for episode_id in report.episode_ids:
        record = engine.pipeline.record(episode_id)
        if record is None:
            continue
        report.facts += len(record.fact_ids)
        report.failed_cycles += record.status == CycleStatus.FAILED
        report.degraded_cycles += record.degraded
    logger.info(
        f"[{user_id}] Ingested {report.messages} messages into {report.episodes} episodes "
        f"and {report.facts} facts"
    )
    return report


_engine = None
_engine_lock = threading.Lock()


def build_engine(**options):
    """Engine from settings: configured provider, MEMORY_STORE_ROOT, settings config"""
    provider = options.pop("provider", None) or build_provider()
    options.setdefault("store_root", settings.MEMORY_STORE_ROOT or None)
    options.setdefault("max_workers", settings.MEMORY_LEARNING_WORKERS)
    return MemoryEngine(provider, **options)


def get_engine():
    """The process-wide engine, built on first use"""
    global _engine
    with _engine_lock:
        if _engine is None:
            _engine = build_engine()
        return _engine


def set_engine(engine):
    global _engine
    with _engine_lock:
        _engine = engine


def reset_engine():
    global _engine
    with _engine_lock:
        engine, _engine = _engine, None
    if engine is not None:
        engine.close(wait=False)
