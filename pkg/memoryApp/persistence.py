"""Durable storage of the episodic and semantic stores.

Layout under the store root::

    manifest.json                 format_version, embedding_dimension, config_hash
    <user_id>/episodes.jsonl      one episode per line
    <user_id>/facts.jsonl         one fact per line
    <user_id>/cycles.jsonl        one finished learning cycle per line

Every log starts with a header line and is append-only. Embeddings are
base64 strings of little-endian float32 values, so reloads are bit-exact.
"""
import json
import logging
import os
import re
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path

from django.core.exceptions import ValidationError
from django.db import models

from .exceptions import DimensionMismatchError, StoreError
from .models import FORMAT_VERSION, Episode, RandomIds, SemanticFact, SequentialIds
from .retrieval import ItemKind, VectorStore
from .semantic import LearningCycleRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
USER_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.@-]{0,127}$")


class RecordType(models.TextChoices):
    HEADER = "header"
    EPISODE = "episode"
    FACT = "fact"
    CYCLE = "cycle_record"


def validate_user_id(user_id):
    """User ids name directories, so they are restricted to a safe alphabet"""
    if not isinstance(user_id, str) or not USER_ID_PATTERN.match(user_id):
        raise ValidationError(f"Invalid user id: {user_id!r}")
    return user_id


def _dumps(record):
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


class StoreLog:
    """Append-only JSON-lines file with a format header.

    A record is acknowledged only after it has been written, flushed and synced;
    a failed write is truncated away so readers never see a partial line.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._ids = set()
        self._lock = threading.Lock()
        self._repaired = False

    def _drop_torn_tail(self):
        """Cuts a partial last line left by a crash, so the next record starts on its own line"""
        with open(self.path, "r+b") as f:
            size = f.seek(0, os.SEEK_END)
            if size == 0:
                return
            f.seek(size - 1)
            if f.read(1) == b"\n":
                return
            f.seek(0)
            valid = f.read().rfind(b"\n") + 1
            f.truncate(valid)
            f.flush()
            os.fsync(f.fileno())
        logger.warning(f"[{self.path}] Dropped {size - valid} bytes of a torn last line")

    def _ensure_header(self):
        if self.path.exists() and not self._repaired:
            self._drop_torn_tail()
        self._repaired = True
        if self.path.exists() and self.path.stat().st_size > 0:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._write([{"type": RecordType.HEADER.value, "format_version": FORMAT_VERSION}])

    def _write(self, records):
        payload = "".join(_dumps(record) + "\n" for record in records)
        with open(self.path, "a", encoding="utf-8") as f:
            position = f.tell()
            try:
                f.write(payload)
                f.flush()
                os.fsync(f.fileno())
            except OSError as exc:
                f.truncate(position)
                raise StoreError(f"Could not write to {self.path}: {exc}") from exc

    def append(self, record):
        self.append_many([record])

    def append_many(self, records):
        """Writes the records in order, all in one write"""
        if not records:
            return
        with self._lock:
            batch_ids = set()
            for record in records:
                if "type" not in record:
                    raise StoreError("Log records need a 'type' field")
                record_id = record.get("id")
                if record_id is not None:
                    if record_id in self._ids or record_id in batch_ids:
                        raise StoreError(f"Duplicate id: {record_id}")
                    batch_ids.add(record_id)
            try:
                self._ensure_header()
                self._write(records)
            except OSError as exc:
                raise StoreError(f"Could not write to {self.path}: {exc}") from exc
            self._ids.update(batch_ids)

    def read(self):
        """Reads every complete record after the header.

        Raises:
            StoreError: on an unsupported version or a malformed line (with its number)

        Returns:
            list: record dicts in file order
        """
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as f:
            text = f.read()
        lines = text.split("\n")
        # Whatever follows the last newline is either nothing or a torn write
        if lines[-1]:
            logger.warning(f"[{self.path}] Ignoring incomplete last line (torn write)")
        lines = lines[:-1]
        records = []
        for number, line in enumerate(lines, start=1):
            try:
                record = json.loads(line)
            except ValueError:
                raise StoreError(f"{self.path}: malformed record on line {number}")
            if not isinstance(record, dict) or "type" not in record:
                raise StoreError(f"{self.path}: malformed record on line {number}")
            if number == 1:
                if record["type"] != RecordType.HEADER:
                    raise StoreError(f"{self.path}: missing header on line 1")
                if record.get("format_version") != FORMAT_VERSION:
                    raise StoreError(
                        f"{self.path}: unsupported format version {record.get('format_version')!r}"
                    )
                continue
            records.append(record)
        with self._lock:
            self._ids.update(r["id"] for r in records if "id" in r)
        return records


class UserLogs:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.episodes = StoreLog(self.directory / "episodes.jsonl")
        self.facts = StoreLog(self.directory / "facts.jsonl")
        self.cycles = StoreLog(self.directory / "cycles.jsonl")


class UserMemory:
    """Episodic and semantic stores of one user, with their logs when persistent"""

    def __init__(self, user_id, dimension=None, repository=None, ids=None):
        self.user_id = user_id
        self.episodes = VectorStore(ItemKind.EPISODE, dimension)
        self.facts = VectorStore(ItemKind.FACT, dimension)
        self.repository = repository
        self.logs = repository.logs(user_id) if repository is not None else None
        self.ids = ids if ids is not None else SequentialIds()
        self.cycles = []
        self._statements = set()
        self._lock = threading.RLock()

    def has_statement(self, statement):
        with self._lock:
            return statement in self._statements

    def add_episode(self, episode):
        """Persists then publishes an episode; on failure nothing changes"""
        with self._lock:
            self.episodes.check_dimension(episode.embedding)
            if episode.id in self.episodes:
                raise StoreError(f"Duplicate id: {episode.id}")
            if self.repository is not None:
                self.repository.lock_dimension(len(episode.embedding))
                self.logs.episodes.append({"type": RecordType.EPISODE.value, **episode.to_dict()})
            self.episodes.add(episode)

    def add_facts(self, facts):
        """Persists then publishes a batch of facts, all or nothing"""
        if not facts:
            return
        with self._lock:
            for fact in facts:
                self.facts.check_dimension(fact.embedding)
                if fact.id in self.facts:
                    raise StoreError(f"Duplicate id: {fact.id}")
            if self.repository is not None:
                self.repository.lock_dimension(len(facts[0].embedding))
                self.logs.facts.append_many(
                    [{"type": RecordType.FACT.value, **fact.to_dict()} for fact in facts]
                )
            self.facts.add_many(facts)
            self._statements.update(fact.statement for fact in facts)

    def add_cycle(self, record):
        with self._lock:
            if self.logs is not None:
                self.logs.cycles.append({"type": RecordType.CYCLE.value, **record.to_dict()})
            self.cycles.append(record)

    def _restore(self, episodes, facts):
        self.episodes.add_many(episodes)
        self.facts.add_many(facts)
        self._statements.update(fact.statement for fact in facts)
        for item in list(episodes) + list(facts):
            self.ids.observe(item.id)


@dataclass
class Manifest:
    format_version: int = FORMAT_VERSION
    embedding_dimension: int = None
    config_hash: str = None

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "embedding_dimension": self.embedding_dimension,
            "config_hash": self.config_hash,
        }


class MemoryRepository:
    """Disk side of the engine: the manifest and one set of logs per user"""

    def __init__(self, root, config_hash=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._logs = {}
        self.manifest = self._read_manifest()
        if config_hash is not None and self.manifest.config_hash != config_hash:
            if self.manifest.config_hash is not None:
                logger.warning(f"[{self.root}] Store was built with a different engine configuration")
            self.manifest.config_hash = config_hash
            self._write_manifest()

    @property
    def manifest_path(self):
        return self.root / MANIFEST_NAME

    def _read_manifest(self):
        if not self.manifest_path.exists():
            return Manifest()
        try:
            with open(self.manifest_path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, ValueError) as exc:
            raise StoreError(f"Unreadable manifest {self.manifest_path}: {exc}") from exc
        if data.get("format_version") != FORMAT_VERSION:
            raise StoreError(f"Unsupported format version {data.get('format_version')!r}")
        return Manifest(
            format_version=data["format_version"],
            embedding_dimension=data.get("embedding_dimension"),
            config_hash=data.get("config_hash"),
        )

    def _write_manifest(self):
        temporary = self.manifest_path.with_suffix(".tmp")
        try:
            with open(temporary, "w", encoding="utf-8") as f:
                json.dump(self.manifest.to_dict(), f, sort_keys=True, indent=2)
                f.write("\n")
            os.replace(temporary, self.manifest_path)
        except OSError as exc:
            raise StoreError(f"Could not write manifest: {exc}") from exc

    def lock_dimension(self, dimension):
        """Records the store-wide embedding dimension on first use and enforces it afterwards"""
        with self._lock:
            if self.manifest.embedding_dimension is None:
                self.manifest.embedding_dimension = dimension
                self._write_manifest()
            elif self.manifest.embedding_dimension != dimension:
                raise DimensionMismatchError(self.manifest.embedding_dimension, dimension)

    def logs(self, user_id):
        validate_user_id(user_id)
        with self._lock:
            if user_id not in self._logs:
                self._logs[user_id] = UserLogs(self.root / user_id)
            return self._logs[user_id]

    def user_ids(self):
        return sorted(
            entry.name
            for entry in self.root.iterdir()
            if entry.is_dir() and USER_ID_PATTERN.match(entry.name)
            and any((entry / name).exists() for name in ("episodes.jsonl", "facts.jsonl"))
        )

    def load_user(self, user_id, ids=None):
        """Rebuilds one user's stores from the logs"""
        logs = self.logs(user_id)
        episodes = [Episode.from_dict(r) for r in logs.episodes.read() if r["type"] == RecordType.EPISODE]
        facts = [SemanticFact.from_dict(r) for r in logs.facts.read() if r["type"] == RecordType.FACT]
        memory = UserMemory(
            user_id, dimension=self.manifest.embedding_dimension, repository=self, ids=ids
        )
        try:
            memory._restore(episodes, facts)
        except (DimensionMismatchError, StoreError) as exc:
            raise StoreError(f"[{user_id}] Inconsistent store: {exc}") from exc
        try:
            memory.cycles = [
                LearningCycleRecord.from_dict(r) for r in logs.cycles.read() if r["type"] == RecordType.CYCLE
            ]
        except (KeyError, ValueError) as exc:
            raise StoreError(f"[{user_id}] Unreadable cycle record: {exc}") from exc
        return memory


@dataclass
class LoadedStore:
    repository: MemoryRepository
    users: dict = field(default_factory=dict)


def load(path, deterministic=True, config_hash=None):
    """Reconstructs every user's stores from a store root.

    Args:
        path (str or Path): store root
        deterministic (bool): whether new ids continue per-user sequences (replays)
            or are random codes
        config_hash (str): digest of the engine configuration to record in the manifest

    Returns:
        LoadedStore: repository plus a UserMemory per user found on disk
    """
    repository = MemoryRepository(path, config_hash=config_hash)
    users = {}
    for user_id in repository.user_ids():
        ids = SequentialIds() if deterministic else RandomIds()
        users[user_id] = repository.load_user(user_id, ids=ids)
    logger.info(f"[{repository.root}] Loaded {len(users)} users")
    return LoadedStore(repository=repository, users=users)


def snapshot(root, destination):
    """Copies a quiescent store root to a new directory; load() of the copy restores it"""
    root = Path(root)
    destination = Path(destination)
    if destination.exists():
        raise StoreError(f"Snapshot destination already exists: {destination}")
    try:
        shutil.copytree(root, destination)
    except OSError as exc:
        raise StoreError(f"Could not snapshot {root}: {exc}") from exc
    logger.info(f"[{root}] Snapshot written to {destination}")
    return destination
