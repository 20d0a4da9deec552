from unittest import mock

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..episodic import EpisodeDraft, fallback_draft, generate_episode, store_episode
from ..exceptions import DimensionMismatchError, TransportError
from ..llm import RoleTag, ScriptedProvider
from ..models import ReplayClock, join_title_body
from ..persistence import UserMemory
from ..retrieval import retrieve
from .utils import conversation, message

DRAFT = '{"title": "Apple tasting plan", "narrative": "On 2023-06-15, the user planned an apple tasting."}'


class GenerateEpisodeTests(SimpleTestCase):
    def test_scripted_draft(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.EPISODE_GENERATOR, DRAFT)
        draft = generate_episode(conversation(3), provider)
        self.assertEqual(draft, EpisodeDraft("Apple tasting plan", "On 2023-06-15, the user planned an apple tasting."))
        self.assertFalse(draft.degraded)

    def test_prompt_carries_transcript_and_dates(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.EPISODE_GENERATOR, DRAFT)
        segment = conversation(3)
        generate_episode(segment, provider)
        prompt = provider.call_log.entries()[0].request.user_prompt
        for msg in segment:
            self.assertIn(msg.render(), prompt)
        self.assertIn("2023-06-15 10:00", prompt)
        self.assertIn("2023-06-15 10:02", prompt)

    def test_malformed_twice_falls_back(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.EPISODE_GENERATOR, failure_mode="malformed", times=2)
        segment = [
            message(0, "user", "We should plan the apple tasting for Saturday with the kids please"),
            message(1, "assistant", "Great idea."),
        ]
        with self.assertLogs("memoryApp.episodic", "WARNING"):
            draft = generate_episode(segment, provider)
        self.assertTrue(draft.degraded)
        self.assertEqual(draft.title, "We should plan the apple tasting for Saturday")
        self.assertIn("[2023-06-15 10:01:00 UTC] assistant: Great idea.", draft.narrative)

    def test_missing_fields_count_as_malformed(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.EPISODE_GENERATOR, '{"title": "Only a title"}', times=1)
        provider.add_rule(RoleTag.EPISODE_GENERATOR, DRAFT)
        self.assertEqual(generate_episode(conversation(2), provider).title, "Apple tasting plan")

    def test_fallback_uses_first_user_message(self):
        segment = [message(0, "assistant", "Hello!"), message(1, "user", "short one")]
        self.assertEqual(fallback_draft(segment).title, "short one")

    def test_empty_segment(self):
        with self.assertRaises(ValidationError):
            generate_episode([], ScriptedProvider())


class StoreEpisodeTests(SimpleTestCase):
    def setUp(self):
        self.provider = ScriptedProvider(dimension=8)
        self.memory = UserMemory("u1")
        self.draft = EpisodeDraft("Apple tasting plan", "On 2023-06-15, the user planned an apple tasting.")

    def test_time_span_and_ids(self):
        segment = conversation(3)
        first = store_episode(self.draft, segment, "u1", self.provider, self.memory, ReplayClock())
        second = store_episode(self.draft, segment, "u1", self.provider, self.memory, ReplayClock())
        self.assertEqual(first.time_span, (segment[0].timestamp, segment[2].timestamp))
        self.assertEqual((first.id, second.id), ("ep-000001", "ep-000002"))
        self.assertEqual(first.created_at, segment[2].timestamp)
        self.assertEqual(first.source_messages, tuple(segment))
        self.assertEqual(len(self.memory.episodes), 2)

    def test_embeds_title_and_narrative(self):
        episode = store_episode(self.draft, conversation(2), "u1", self.provider, self.memory)
        expected = self.provider.embed(join_title_body(self.draft.title, self.draft.narrative))
        self.assertEqual(episode.embedding.tolist(), expected.astype("float32").tolist())

    def test_embedder_fault_stores_nothing(self):
        store_episode(self.draft, conversation(2), "u1", self.provider, self.memory)
        before = self.memory.episodes.snapshot()
        with mock.patch.object(self.provider, "_embed", side_effect=TransportError("down")):
            with self.assertRaises(TransportError):
                store_episode(self.draft, conversation(2), "u1", self.provider, self.memory)
        self.assertEqual(self.memory.episodes.snapshot(), before)

    def test_dimension_mismatch(self):
        store_episode(self.draft, conversation(2), "u1", self.provider, self.memory)
        with self.assertRaisesMessage(DimensionMismatchError, "dimension mismatch"):
            store_episode(self.draft, conversation(2), "u1", ScriptedProvider(dimension=16), self.memory)
        self.assertEqual(len(self.memory.episodes), 1)

    def test_self_retrieval_ranks_first(self):
        topics = ["apples", "sourdough", "marathon", "wedding", "Spanish", "tomatoes", "kitten"]
        stored = [
            store_episode(
                EpisodeDraft(f"About {topic}", f"The user talked about {topic}."),
                [message(i)],
                "u1",
                self.provider,
                self.memory,
            )
            for i, topic in enumerate(topics)
        ]
        for episode in stored:
            with self.subTest(episode=episode.id):
                top = retrieve(episode.embedding, self.memory.episodes, 1)[0]
                self.assertEqual(top.item_id, episode.id)
                self.assertGreaterEqual(top.similarity, 1 - 1e-6)
