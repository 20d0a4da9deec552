"""Fixtures shared by the test modules"""
import shutil
import tempfile
from datetime import datetime, timedelta, timezone
from pathlib import Path

from ..engine import MemoryEngine
from ..llm import ScriptedProvider
from ..models import EngineConfig, Message

DATA_DIR = Path(__file__).resolve().parent / "data"
TRANSCRIPT = DATA_DIR / "transcript.json"
SCRIPT = DATA_DIR / "script.json"
CASES = DATA_DIR / "cases.json"

START = datetime(2023, 6, 15, 10, 0, tzinfo=timezone.utc)


def message(index, role="user", content=None, start=START):
    """Message number ``index`` of a synthetic conversation, one minute apart"""
    return Message.create(role, content or f"message number {index}", start + timedelta(minutes=index))


def conversation(count, start=START):
    return [
        message(i, "user" if i % 2 == 0 else "assistant", start=start)
        for i in range(count)
    ]


def fixture_provider(**kwargs):
    return ScriptedProvider.from_file(SCRIPT, **kwargs)


def quiet_provider(dimension=8):
    """Provider that never cuts on topic, narrates generically and learns nothing"""
    provider = ScriptedProvider(dimension=dimension)
    provider.add_rule("boundary_detector", '{"is_boundary": false, "confidence": 0.0}')
    provider.add_rule("episode_generator", '{"title": "Chat", "narrative": "The user chatted."}')
    provider.add_rule("episode_predictor", "Nothing new.")
    provider.add_rule("knowledge_distiller", "[]")
    provider.add_rule("answerer", "I don't know.")
    return provider


class TemporaryDirectoryMixin:
    """Gives each test a scratch directory, removed afterwards"""

    def make_directory(self):
        path = Path(tempfile.mkdtemp(prefix="memory-test-"))
        self.addCleanup(shutil.rmtree, path, ignore_errors=True)
        return path

    def make_engine(self, provider=None, cfg=None, store_root=None, **kwargs):
        engine = MemoryEngine(
            provider or fixture_provider(), cfg=cfg or EngineConfig(), store_root=store_root, **kwargs
        )
        self.addCleanup(engine.close)
        return engine
