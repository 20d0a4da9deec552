import random
from collections import Counter
from itertools import product

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..exceptions import TransportError
from ..llm import RoleTag, ScriptedProvider
from ..models import BoundaryDecision, EngineConfig, MessageBuffer
from ..segmentation import (
    PARSE_FAILURE_FLAG,
    SegmentationOutcome,
    Segmenter,
    TriggerCause,
    detect_boundary,
    should_trigger,
)
from .utils import conversation, message

CFG = EngineConfig()


def detector(*responses, **options):
    provider = ScriptedProvider(**options)
    for response in responses:
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, response)
    return provider


NO_BOUNDARY = '{"is_boundary": false, "confidence": 0.1}'


class ShouldTriggerTests(SimpleTestCase):
    def test_truth_table(self):
        cells = 0
        for b, c, length in product(
            (True, False), (0.0, 0.69, 0.7, 0.71, 1.0), (0, 1, 24, 25, 26)
        ):
            expected = (b and c > 0.7) or length >= 25
            triggered, cause = should_trigger(BoundaryDecision(b, c), length, CFG)
            with self.subTest(b=b, c=c, length=length):
                self.assertEqual(triggered, expected)
                if length >= 25:
                    self.assertEqual(cause, TriggerCause.BUFFER_FULL)
                elif expected:
                    self.assertEqual(cause, TriggerCause.SEMANTIC_BOUNDARY)
                else:
                    self.assertEqual(cause, TriggerCause.NONE)
            cells += 1
        self.assertEqual(cells, 50)

    def test_examples(self):
        self.assertEqual(should_trigger(BoundaryDecision(True, 0.8), 5, CFG), (True, TriggerCause.SEMANTIC_BOUNDARY))
        self.assertEqual(should_trigger(BoundaryDecision(True, 0.7), 5, CFG), (False, TriggerCause.NONE))
        self.assertEqual(should_trigger(BoundaryDecision(False, 0.99), 25, CFG), (True, TriggerCause.BUFFER_FULL))
        self.assertEqual(should_trigger(BoundaryDecision(False, 0.0), 1, CFG), (False, TriggerCause.NONE))

    def test_negative_length(self):
        with self.assertRaises(ValidationError):
            should_trigger(BoundaryDecision(False, 0.0), -1, CFG)


class DetectBoundaryTests(SimpleTestCase):
    def test_empty_buffer_makes_no_call(self):
        provider = detector(strict=True)
        decision = detect_boundary(message(0), MessageBuffer("u1"), provider, CFG)
        self.assertEqual((decision.is_boundary, decision.confidence), (False, 0.0))
        self.assertEqual(len(provider.call_log), 0)

    def test_scripted_decision(self):
        provider = detector('{"is_boundary": true, "confidence": 0.9}')
        decision = detect_boundary(message(1), MessageBuffer("u1", (message(0),)), provider, CFG)
        self.assertEqual((decision.is_boundary, decision.confidence), (True, 0.9))

    def test_confidence_is_clamped(self):
        provider = detector('The answer: {"is_boundary": true, "confidence": 1.7}')
        decision = detect_boundary(message(1), MessageBuffer("u1", (message(0),)), provider, CFG)
        self.assertEqual((decision.is_boundary, decision.confidence), (True, 1.0))
        self.assertIn("clamped", decision.flags)

    def test_malformed_then_valid(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, failure_mode="malformed")
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, '{"is_boundary": true, "confidence": 0.8}')
        decision = detect_boundary(message(1), MessageBuffer("u1", (message(0),)), provider, CFG)
        self.assertEqual(decision.confidence, 0.8)
        self.assertEqual(len(provider.call_log), 2)

    def test_parse_failure_degrades(self):
        provider = detector('{"is_boundary": "maybe", "confidence": 0.8}')
        with self.assertLogs("memoryApp.segmentation", "WARNING"):
            decision = detect_boundary(message(1), MessageBuffer("u1", (message(0),)), provider, CFG)
        self.assertEqual((decision.is_boundary, decision.confidence), (False, 0.0))
        self.assertEqual(decision.flags, (PARSE_FAILURE_FLAG,))
        self.assertEqual(len(provider.call_log), 2)

    def test_prompt_carries_buffer_and_new_message(self):
        provider = detector(NO_BOUNDARY)
        buffer = MessageBuffer("u1", tuple(conversation(3)))
        new = message(3, content="By the way, my sister is getting married")
        detect_boundary(new, buffer, provider, CFG)
        (entry,) = provider.call_log.entries()
        for msg in buffer.messages:
            self.assertIn(msg.render(), entry.request.user_prompt)
        self.assertIn(new.render(), entry.request.user_prompt)
        self.assertEqual(entry.request.focus, new.render())

    def test_long_buffer_is_truncated(self):
        provider = detector(NO_BOUNDARY)
        cfg = EngineConfig(detector_token_budget=200, detector_context_messages=3)
        messages = tuple(message(i, content=f"turn {i} " + "words " * 40) for i in range(10))
        detect_boundary(message(10), MessageBuffer("u1", messages), provider, cfg)
        prompt = provider.call_log.entries()[0].request.user_prompt
        self.assertNotIn(messages[6].render(), prompt)
        for msg in messages[7:]:
            self.assertIn(msg.render(), prompt)
        self.assertIn("7 earlier messages omitted", prompt)

    def test_transport_error_propagates(self):
        provider = ScriptedProvider(attempts=2)
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, failure_mode="timeout", times=5)
        with self.assertRaises(TransportError):
            detect_boundary(message(1), MessageBuffer("u1", (message(0),)), provider, CFG)


class SegmenterTests(SimpleTestCase):
    def test_outcome_invariants(self):
        with self.assertRaises(ValueError):
            SegmentationOutcome(triggered=True, segment=(), trigger_cause=TriggerCause.SESSION_END)
        with self.assertRaises(ValueError):
            SegmentationOutcome(triggered=False, trigger_cause=TriggerCause.BUFFER_FULL)

    def test_first_message_opens_the_buffer(self):
        segmenter = Segmenter(detector(strict=True), CFG)
        outcome = segmenter.append_message("u1", message(0))
        self.assertFalse(outcome.triggered)
        self.assertEqual(outcome.trigger_cause, TriggerCause.NONE)
        self.assertEqual(segmenter.buffer("u1").messages, (message(0),))

    def test_semantic_boundary_keeps_new_message(self):
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, '{"is_boundary": true, "confidence": 0.9}', call=5)
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, NO_BOUNDARY)
        segmenter = Segmenter(provider, CFG)
        messages = conversation(6)
        outcomes = [segmenter.append_message("u1", m) for m in messages]
        self.assertFalse(any(o.triggered for o in outcomes[:5]))
        self.assertEqual(outcomes[5].trigger_cause, TriggerCause.SEMANTIC_BOUNDARY)
        self.assertEqual(outcomes[5].segment, tuple(messages[:5]))
        self.assertEqual(segmenter.buffer("u1").messages, (messages[5],))

    def test_buffer_full_includes_new_message(self):
        segmenter = Segmenter(detector(NO_BOUNDARY), CFG)
        messages = conversation(25)
        outcomes = [segmenter.append_message("u1", m) for m in messages]
        self.assertFalse(any(o.triggered for o in outcomes[:24]))
        self.assertEqual(outcomes[24].trigger_cause, TriggerCause.BUFFER_FULL)
        self.assertEqual(outcomes[24].segment, tuple(messages))
        self.assertEqual(len(segmenter.buffer("u1")), 0)

    def test_thirty_messages_make_two_segments(self):
        segmenter = Segmenter(detector('{"is_boundary": false, "confidence": 0.0}'), CFG)
        segments = []
        for m in conversation(30):
            outcome = segmenter.append_message("u1", m)
            if outcome.triggered:
                segments.append(outcome.segment)
        outcome = segmenter.flush_session("u1")
        self.assertEqual(outcome.trigger_cause, TriggerCause.SESSION_END)
        segments.append(outcome.segment)
        self.assertEqual([len(s) for s in segments], [25, 5])

    def test_flush_session(self):
        segmenter = Segmenter(detector(NO_BOUNDARY), CFG)
        segmenter.append_message("u1", message(0))
        segmenter.append_message("u1", message(1))
        outcome = segmenter.flush_session("u1")
        self.assertEqual(outcome.segment, (message(0), message(1)))
        again = segmenter.flush_session("u1")
        self.assertFalse(again.triggered)
        self.assertIsNone(again.segment)
        self.assertFalse(segmenter.flush_session("never-seen").triggered)

    def test_buffer_unchanged_on_error(self):
        provider = ScriptedProvider(attempts=1)
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, failure_mode="transport_error")
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, NO_BOUNDARY)
        segmenter = Segmenter(provider, CFG)
        segmenter.append_message("u1", message(0))
        with self.assertRaises(TransportError):
            segmenter.append_message("u1", message(1))
        self.assertEqual(segmenter.buffer("u1").messages, (message(0),))
        segmenter.append_message("u1", message(1))
        self.assertEqual(len(segmenter.buffer("u1")), 2)

    def test_out_of_order_message_is_rejected(self):
        segmenter = Segmenter(detector(NO_BOUNDARY), CFG)
        segmenter.append_message("u1", message(5))
        with self.assertRaises(ValidationError):
            segmenter.append_message("u1", message(4))
        self.assertEqual(segmenter.buffer("u1").messages, (message(5),))

    def test_no_message_lost_or_duplicated(self):
        rng = random.Random(20230615)
        provider = ScriptedProvider()
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, '{"is_boundary": true, "confidence": 0.95}', contains="shift")
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, '{"is_boundary": true, "confidence": 0.5}', contains="weak")
        provider.add_rule(RoleTag.BOUNDARY_DETECTOR, NO_BOUNDARY)
        segmenter = Segmenter(provider, EngineConfig(max_buffer_size=7))
        users = [f"user-{n}" for n in range(6)]
        counters = Counter()
        appended = {user: [] for user in users}
        emitted = {user: [] for user in users}

        for _ in range(1200):
            user = rng.choice(users)
            if rng.random() < 0.05:
                outcome = segmenter.flush_session(user)
            else:
                index = counters[user]
                counters[user] += 1
                kind = rng.choice(["shift", "weak", "plain", "plain"])
                msg = message(index, rng.choice(["user", "assistant"]), f"{user} {kind} {index}")
                appended[user].append(msg)
                outcome = segmenter.append_message(user, msg)
            if outcome.triggered:
                emitted[user].extend(outcome.segment)

        self.assertGreaterEqual(sum(counters.values()), 1000)
        for user in users:
            with self.subTest(user=user):
                live = list(segmenter.buffer(user).messages)
                self.assertEqual(Counter(emitted[user] + live), Counter(appended[user]))
                self.assertEqual(emitted[user] + live, appended[user])
                self.assertTrue(all(m.content.startswith(user + " ") for m in emitted[user] + live))
