import json

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..engine import ingest
from ..exceptions import DimensionMismatchError, StoreError
from ..models import Episode, SequentialIds
from ..persistence import MemoryRepository, StoreLog, UserMemory, load, snapshot, validate_user_id
from ..retrieval import retrieve
from ..transcripts import load_transcript
from .utils import TRANSCRIPT, TemporaryDirectoryMixin, conversation, message, quiet_provider


def episode_record(index, dimension=8):
    segment = conversation(2)
    episode = Episode(
        id=f"ep-{index:06d}",
        user_id="u1",
        title=f"Title {index}",
        narrative=f"Narrative {index}.",
        source_messages=segment,
        embedding=np.ones(dimension),
        created_at=segment[-1].timestamp,
    )
    return {"type": "episode", **episode.to_dict()}


class StoreLogTests(TemporaryDirectoryMixin, SimpleTestCase):
    def setUp(self):
        self.path = self.make_directory() / "u1" / "episodes.jsonl"

    def test_append_order_and_header(self):
        log = StoreLog(self.path)
        log.append(episode_record(1))
        log.append({"type": "fact", "id": "fact-000001", "statement": "A fact."})
        lines = self.path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(json.loads(lines[0]), {"type": "header", "format_version": 1})
        self.assertEqual([r["type"] for r in StoreLog(self.path).read()], ["episode", "fact"])

    def test_duplicate_id_is_rejected(self):
        log = StoreLog(self.path)
        log.append(episode_record(1))
        with self.assertRaisesMessage(StoreError, "Duplicate id: ep-000001"):
            log.append(episode_record(1))
        with self.assertRaises(StoreError):
            log.append_many([episode_record(2), episode_record(2)])
        self.assertEqual(len(StoreLog(self.path).read()), 1)

    def test_duplicates_detected_after_reload(self):
        StoreLog(self.path).append(episode_record(1))
        log = StoreLog(self.path)
        log.read()
        with self.assertRaises(StoreError):
            log.append(episode_record(1))

    def test_torn_last_line_is_ignored(self):
        log = StoreLog(self.path)
        log.append_many([episode_record(1), episode_record(2)])
        with open(self.path, "a", encoding="utf-8") as f:
            f.write('{"type": "episode", "id": "ep-0000')
        with self.assertLogs("memoryApp.persistence", "WARNING"):
            records = StoreLog(self.path).read()
        self.assertEqual([r["id"] for r in records], ["ep-000001", "ep-000002"])

    def test_append_after_torn_line(self):
        StoreLog(self.path).append_many([episode_record(1), episode_record(2)])
        with open(self.path, "a", encoding="utf-8") as f:
            f.write('{"type": "episode", "id": "ep-0000')
        log = StoreLog(self.path)
        with self.assertLogs("memoryApp.persistence", "WARNING"):
            log.read()
            log.append(episode_record(3))
        log.append(episode_record(4))
        self.assertTrue(self.path.read_bytes().endswith(b"\n"))
        self.assertEqual([r["id"] for r in StoreLog(self.path).read()], [f"ep-{i:06d}" for i in range(1, 5)])

    def test_torn_header_is_rewritten(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_text('{"type": "head', encoding="utf-8")
        with self.assertLogs("memoryApp.persistence", "WARNING"):
            StoreLog(self.path).append(episode_record(1))
        lines = self.path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(json.loads(lines[0]), {"type": "header", "format_version": 1})
        self.assertEqual([r["id"] for r in StoreLog(self.path).read()], ["ep-000001"])

    def test_malformed_line_is_named(self):
        log = StoreLog(self.path)
        log.append_many([episode_record(1), episode_record(2)])
        lines = self.path.read_text(encoding="utf-8").splitlines()
        lines[2] = "{not json"
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with self.assertRaisesMessage(StoreError, "malformed record on line 3"):
            StoreLog(self.path).read()

    def test_unsupported_version(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_text('{"type": "header", "format_version": 99}\n', encoding="utf-8")
        with self.assertRaisesMessage(StoreError, "unsupported format version"):
            StoreLog(self.path).read()

    def test_missing_header(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_text(json.dumps(episode_record(1)) + "\n", encoding="utf-8")
        with self.assertRaisesMessage(StoreError, "missing header"):
            StoreLog(self.path).read()

    def test_header_only(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_text('{"type": "header", "format_version": 1}\n', encoding="utf-8")
        self.assertEqual(StoreLog(self.path).read(), [])

    def test_records_need_a_type(self):
        with self.assertRaises(StoreError):
            StoreLog(self.path).append({"id": "x"})


class RepositoryTests(TemporaryDirectoryMixin, SimpleTestCase):
    def test_user_ids_are_validated(self):
        for bad in ("", "../etc", "a/b", ".hidden", "x" * 129):
            with self.subTest(user_id=bad), self.assertRaises(ValidationError):
                validate_user_id(bad)
        self.assertEqual(validate_user_id("maya.s@example-1"), "maya.s@example-1")

    def test_manifest_locks_dimension(self):
        root = self.make_directory()
        repository = MemoryRepository(root, config_hash="abc")
        repository.lock_dimension(8)
        with self.assertRaises(DimensionMismatchError):
            repository.lock_dimension(16)
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest, {"format_version": 1, "embedding_dimension": 8, "config_hash": "abc"})

    def test_config_change_is_logged(self):
        root = self.make_directory()
        MemoryRepository(root, config_hash="abc")
        with self.assertLogs("memoryApp.persistence", "WARNING"):
            repository = MemoryRepository(root, config_hash="def")
        self.assertEqual(repository.manifest.config_hash, "def")

    def test_empty_root(self):
        loaded = load(self.make_directory())
        self.assertEqual(loaded.users, {})

    def test_header_only_logs_give_empty_stores(self):
        root = self.make_directory()
        (root / "u1").mkdir()
        for name in ("episodes.jsonl", "facts.jsonl"):
            (root / "u1" / name).write_text('{"type": "header", "format_version": 1}\n', encoding="utf-8")
        loaded = load(root)
        self.assertEqual(len(loaded.users["u1"].episodes), 0)
        self.assertEqual(len(loaded.users["u1"].facts), 0)

    def test_user_memory_rejects_duplicate_episode(self):
        repository = MemoryRepository(self.make_directory())
        memory = UserMemory("u1", repository=repository, ids=SequentialIds())
        episode = Episode.from_dict(episode_record(1))
        memory.add_episode(episode)
        with self.assertRaises(StoreError):
            memory.add_episode(episode)
        self.assertEqual(len(memory.episodes), 1)

    def test_snapshot(self):
        root = self.make_directory()
        repository = MemoryRepository(root)
        UserMemory("u1", repository=repository).add_episode(Episode.from_dict(episode_record(1)))
        destination = self.make_directory() / "copy"
        snapshot(root, destination)
        self.assertEqual([e.id for e in load(destination).users["u1"].episodes.snapshot()], ["ep-000001"])
        with self.assertRaises(StoreError):
            snapshot(root, destination)


class RoundTripTests(TemporaryDirectoryMixin, SimpleTestCase):
    def test_replay_state_reloads_bit_exactly(self):
        root = self.make_directory()
        engine = self.make_engine(store_root=root)
        ingest(load_transcript(TRANSCRIPT), engine, user_id="maya")
        before = engine.memory("maya")
        engine.close()

        after = load(root).users["maya"]
        self.assertEqual(
            [e.to_dict() for e in after.episodes.snapshot()],
            [e.to_dict() for e in before.episodes.snapshot()],
        )
        self.assertEqual(
            [f.to_dict() for f in after.facts.snapshot()],
            [f.to_dict() for f in before.facts.snapshot()],
        )
        self.assertEqual(len(after.cycles), len(before.cycles))

        rng = np.random.default_rng(11)
        for _ in range(20):
            query = rng.normal(size=8)
            for kind in ("episodes", "facts"):
                self.assertEqual(
                    retrieve(query, getattr(after, kind), 10, 0.0),
                    retrieve(query, getattr(before, kind), 10, 0.0),
                )

    def test_ids_continue_after_reload(self):
        root = self.make_directory()
        engine = self.make_engine(store_root=root)
        ingest(load_transcript(TRANSCRIPT), engine, user_id="maya")
        count = len(engine.episodes("maya"))
        engine.close()
        memory = load(root).users["maya"]
        self.assertEqual(memory.ids.new_id("ep"), f"ep-{count + 1:06d}")

    def test_store_reopens_after_a_crash_and_a_new_write(self):
        root = self.make_directory()
        engine = self.make_engine(provider=quiet_provider(), store_root=root)
        engine.append_message("u1", message(0))
        engine.flush_session("u1")
        engine.drain("u1", timeout=10)
        engine.close()
        with open(root / "u1" / "episodes.jsonl", "a", encoding="utf-8") as f:
            f.write('{"type": "episode", "id": "ep-0000')

        with self.assertLogs("memoryApp.persistence", "WARNING"):
            restarted = self.make_engine(provider=quiet_provider(), store_root=root)
            restarted.append_message("u1", message(5))
            second = restarted.flush_session("u1").episode
        restarted.drain("u1", timeout=10)
        restarted.close()

        self.assertEqual(second.id, "ep-000002")
        reloaded = load(root).users["u1"]
        self.assertEqual([e.id for e in reloaded.episodes.snapshot()], ["ep-000001", "ep-000002"])
