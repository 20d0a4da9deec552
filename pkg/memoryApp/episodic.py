"""Episode generation and storage.

A cut segment is narrated by the episode generator into a title and a
third-person narrative, embedded, and stored in the user's episodic store.
"""
import logging
from dataclasses import dataclass

from django.core.exceptions import ValidationError

from .exceptions import ResponseParseError
from .llm import ChatRequest, ResponseFormat, RoleTag, extract_json
from .models import EPISODE_PREFIX, Episode, ReplayClock, Role, join_title_body, render_messages
from .prompts import render_prompt

logger = logging.getLogger(__name__)

FALLBACK_TITLE_WORDS = 8


@dataclass(frozen=True)
class EpisodeDraft:
    title: str
    narrative: str
    # Set when the draft is the fallback built from the raw transcript
    degraded: bool = False

    def __post_init__(self):
        if not isinstance(self.title, str) or not self.title.strip():
            raise ValidationError("Episode title must be non-empty")
        if not isinstance(self.narrative, str) or not self.narrative.strip():
            raise ValidationError("Episode narrative must be non-empty")


def fallback_draft(segment):
    """Title from the first words of the first user message, narrative from the transcript"""
    first = next((m for m in segment if m.role == Role.USER), segment[0])
    title = " ".join(first.content.split()[:FALLBACK_TITLE_WORDS])
    return EpisodeDraft(title=title, narrative=render_messages(segment), degraded=True)


def _parse_draft(text):
    data = extract_json(text, "object")
    title = data.get("title")
    narrative = data.get("narrative")
    if not isinstance(title, str) or not title.strip():
        raise ResponseParseError("title must be a non-empty string")
    if not isinstance(narrative, str) or not narrative.strip():
        raise ResponseParseError("narrative must be a non-empty string")
    return EpisodeDraft(title=title.strip(), narrative=narrative.strip())


def generate_episode(segment, provider, user_id=""):
    """Narrates a segment into a titled, third-person episode draft.

    Args:
        segment (list): messages of the segment, in order
        provider (LLMProvider): chat backend
        user_id (str): owner, for logging

    Raises:
        ValidationError: if the segment is empty
        TransportError: if the provider stays unreachable

    Returns:
        EpisodeDraft: parsed draft, or a degraded fallback after two unparseable answers
    """
    if not segment:
        raise ValidationError("Cannot generate an episode from an empty segment")
    transcript = render_messages(segment)
    system_prompt, user_prompt = render_prompt(
        "episode_generator",
        conversation=transcript,
        start=segment[0].timestamp,
        end=segment[-1].timestamp,
    )
    request = ChatRequest(
        role_tag=RoleTag.EPISODE_GENERATOR,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.JSON_OBJECT,
        focus=transcript,
    )
    for attempt in range(2):
        text = provider.chat(request)
        try:
            return _parse_draft(text)
        except ResponseParseError as exc:
            logger.warning(f"[{user_id}] Unparseable episode draft (attempt {attempt + 1}): {exc}")
    logger.warning(f"[{user_id}] Falling back to a transcript episode")
    return fallback_draft(segment)


def store_episode(draft, segment, user_id, embedder, memory, clock=None):
    """Embeds title and narrative, assigns an id and stores the episode.

    Nothing is stored unless the embedding succeeds and matches the store dimension.

    Args:
        draft (EpisodeDraft): title and narrative
        segment (list): source messages, kept verbatim
        user_id (str): owner
        embedder (LLMProvider): embedding backend
        memory (UserMemory): the user's stores
        clock: SystemClock or ReplayClock for created_at

    Returns:
        Episode: the stored episode, retrievable from now on
    """
    clock = clock or ReplayClock()
    embedding = embedder.embed(join_title_body(draft.title, draft.narrative))
    memory.episodes.check_dimension(embedding)
    episode = Episode(
        id=memory.ids.new_id(EPISODE_PREFIX),
        user_id=user_id,
        title=draft.title,
        narrative=draft.narrative,
        source_messages=segment,
        embedding=embedding,
        created_at=clock.now(segment[-1].timestamp),
    )
    memory.add_episode(episode)
    logger.info(f"[{user_id}][{episode.id}] Episode stored: {episode.title}")
    return episode
