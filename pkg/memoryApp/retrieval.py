"""Dense-vector retrieval over the episodic and semantic stores, and query-time
context assembly.

Search is an exact linear scan in three stages: similarity to every stored
item, top-m selection, then threshold filtering.
"""
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from django.db import models
from django.utils.module_loading import import_string

from .exceptions import DimensionMismatchError, StoreError, UndefinedSimilarityError
from .models import render_messages

logger = logging.getLogger(__name__)

CONTEXT_FORMAT_VERSION = 1
EPISODES_MARKER = "== EPISODES =="
KNOWLEDGE_MARKER = "== KNOWLEDGE =="


class ItemKind(models.TextChoices):
    EPISODE = "episode"
    FACT = "fact"


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors.

    Raises:
        DimensionMismatchError: if the vectors have different lengths
        UndefinedSimilarityError: if either vector is all zeros
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(a.shape[-1], b.shape[-1])
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise UndefinedSimilarityError()
    return float(np.dot(a, b) / (norm_a * norm_b))


@dataclass(frozen=True)
class ScoredItem:
    item_id: str
    similarity: float
    kind: str

    def to_dict(self):
        return {"item_id": self.item_id, "similarity": self.similarity, "kind": self.kind}


class VectorStore:
    """In-memory store of embedded items (episodes or facts) for one user.

    The dimension is locked by the first vector ever stored, or given up front
    when the store is rebuilt from disk. Writers are serialized; readers work
    on snapshots.
    """

    def __init__(self, kind, dimension=None):
        self.kind = kind
        self.dimension = dimension
        self._items = {}
        self._lock = threading.RLock()

    def __len__(self):
        with self._lock:
            return len(self._items)

    def __contains__(self, item_id):
        with self._lock:
            return item_id in self._items

    def check_dimension(self, vector, expected=None):
        expected = expected if expected is not None else self.dimension
        size = len(vector)
        if expected is not None and size != expected:
            raise DimensionMismatchError(expected, size)
        return size

    def add(self, item):
        self.add_many([item])

    def add_many(self, items):
        """Adds every item or none of them"""
        with self._lock:
            dimension = self.dimension
            seen = set()
            for item in items:
                dimension = self.check_dimension(item.embedding, dimension)
                if item.id in self._items or item.id in seen:
                    raise StoreError(f"Duplicate id: {item.id}")
                seen.add(item.id)
            for item in items:
                self._items[item.id] = item
            self.dimension = dimension

    def get(self, item_id):
        with self._lock:
            return self._items[item_id]

    def snapshot(self):
        """Items in insertion order, as of now"""
        with self._lock:
            return tuple(self._items.values())


def retrieve(query, store, m, threshold=None):
    """Unified retrieval: top-m items by cosine similarity, filtered by a threshold.

    Ties are broken by earlier created_at, then by id. Items whose similarity equals
    the threshold are kept.

    Args:
        query (array): query embedding
        store (VectorStore): store to search
        m (int): maximum number of results
        threshold (float): optional minimum similarity

    Raises:
        DimensionMismatchError: if the query doesn't match the store dimension

    Returns:
        list: ScoredItem list, similarity non-increasing
    """
    if isinstance(m, bool) or not isinstance(m, int) or m < 1:
        raise ValidationError(f"Retrieval limit must be a positive integer, got {m!r}")
    items = store.snapshot()
    if not items:
        return []
    query = np.asarray(query, dtype=np.float64)
    store.check_dimension(query)
    # Stage 1: similarity to every item
    scored = [(cosine_similarity(query, item.embedding), item) for item in items]
    # Stage 2: top-m with deterministic tie-breaking
    scored.sort(key=lambda pair: (-pair[0], pair[1].created_at, pair[1].id))
    selected = scored[:m]
    # Stage 3: threshold filtering, inclusive
    if threshold is not None:
        selected = [pair for pair in selected if pair[0] >= threshold]
    return [ScoredItem(item.id, similarity, store.kind) for similarity, item in selected]


def estimate_tokens(text):
    """Rough token count: four characters per token"""
    return math.ceil(len(text) / 4)


def get_token_estimator():
    return import_string(settings.MEMORY_TOKEN_ESTIMATOR)


@dataclass(frozen=True)
class ContextEpisode:
    episode: object
    similarity: float
    include_raw_text: bool

    def to_dict(self):
        start, end = self.episode.time_span
        data = {
            "id": self.episode.id,
            "title": self.episode.title,
            "narrative": self.episode.narrative,
            "time_span": [start.isoformat(), end.isoformat()],
            "similarity": self.similarity,
            "include_raw_text": self.include_raw_text,
        }
        if self.include_raw_text:
            data["source_messages"] = [m.to_dict() for m in self.episode.source_messages]
        return data


@dataclass(frozen=True)
class ContextFact:
    fact: object
    similarity: float

    def to_dict(self):
        return {
            "id": self.fact.id,
            "statement": self.fact.statement,
            "source_episode_id": self.fact.source_episode_id,
            "created_at": self.fact.created_at.isoformat(),
            "similarity": self.similarity,
        }


@dataclass(frozen=True)
class MemoryContext:
    """Retrieval result ready to be injected in a prompt"""

    query: str
    episodes: tuple
    facts: tuple
    rendered: str
    token_estimate: int

    def to_dict(self):
        return {
            "query": self.query,
            "episodes": [e.to_dict() for e in self.episodes],
            "facts": [f.to_dict() for f in self.facts],
            "rendered": self.rendered,
            "token_estimate": self.token_estimate,
        }


def _format_time(value):
    return f"{value:%Y-%m-%d %H:%M:%S} UTC"


def render_context(query_text, episodes, facts):
    """Deterministic text block: header, episodes section, knowledge section"""
    lines = [f"== MEMORY CONTEXT v{CONTEXT_FORMAT_VERSION} ==", f"query: {query_text}", EPISODES_MARKER]
    if not episodes:
        lines.append("(none)")
    for rank, entry in enumerate(episodes, start=1):
        episode = entry.episode
        start, end = episode.time_span
        lines.append(f"[{rank}] {episode.title}")
        lines.append(
            f"time: {_format_time(start)} -> {_format_time(end)} | similarity: {entry.similarity:.4f}"
        )
        lines.append(episode.narrative)
        if entry.include_raw_text:
            lines.append("-- transcript --")
            lines.append(render_messages(episode.source_messages))
            lines.append("-- end transcript --")
    lines.append(KNOWLEDGE_MARKER)
    if not facts:
        lines.append("(none)")
    for entry in facts:
        lines.append(f"- [{entry.fact.created_at:%Y-%m-%d}] {entry.fact.statement}")
    return "\n".join(lines) + "\n"


def assemble_context(query_text, user_id, stores, embedder, cfg, estimator=None):
    """Builds the memory context for a query.

    Embeds the query once, retrieves the top-k episodes and the top multiplier*k
    facts with the similarity threshold, and marks the best
    ``raw_text_episode_count`` episodes to carry their original transcript.

    Args:
        query_text (str): question or search text
        user_id (str): owner of the stores
        stores: object with ``episodes`` and ``facts`` VectorStores, or None for an unknown user
        embedder (LLMProvider): embedding backend
        cfg (EngineConfig): retrieval parameters
        estimator (callable): token estimator, defaults to the configured one

    Returns:
        MemoryContext: ranked episodes and facts plus their rendering
    """
    if not isinstance(query_text, str) or not query_text.strip():
        raise ValidationError("Query text is empty")
    estimator = estimator or get_token_estimator()
    query = embedder.embed(query_text)

    episodes = []
    facts = []
    if stores is not None and cfg.episodic_retrieval:
        hits = retrieve(query, stores.episodes, cfg.top_k_episodes, cfg.similarity_threshold)
        episodes = [
            ContextEpisode(
                episode=stores.episodes.get(hit.item_id),
                similarity=hit.similarity,
                include_raw_text=rank < cfg.raw_text_episode_count,
            )
            for rank, hit in enumerate(hits)
        ]
    if stores is not None and cfg.semantic_retrieval:
        hits = retrieve(query, stores.facts, cfg.top_k_facts, cfg.similarity_threshold)
        facts = [ContextFact(fact=stores.facts.get(hit.item_id), similarity=hit.similarity) for hit in hits]

    rendered = render_context(query_text, episodes, facts)
    logger.debug(f"[{user_id}] Context assembled: {len(episodes)} episodes, {len(facts)} facts")
    return MemoryContext(
        query=query_text,
        episodes=tuple(episodes),
        facts=tuple(facts),
        rendered=rendered,
        token_estimate=estimator(rendered),
    )
