"""Shared options of the engine commands.

Configuration is layered: settings, then ``--config`` (JSON or TOML), then flags.
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from ..engine import MemoryEngine, config_from_settings
from ..exceptions import IngestError, MemoryEngineError
from ..llm import build_provider
from ..models import EngineConfig, validate_config

try:
    import tomllib
except ImportError:  # Python < 3.11
    tomllib = None


def read_config_file(path):
    """EngineConfig values from a JSON or TOML file"""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            if tomllib is None:
                raise CommandError("TOML configuration needs Python 3.11 or later")
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as exc:
        raise CommandError(f"Unreadable configuration file {path}: {exc}")


class EngineCommand(BaseCommand):
    """Base for commands that run the memory engine"""

    def add_engine_arguments(self, parser):
        parser.add_argument("--store", help="Store root directory")
        parser.add_argument("--config", help="EngineConfig file (JSON or TOML)")
        parser.add_argument("--provider", choices=["scripted", "http"])
        parser.add_argument("--script", help="Script file of the scripted provider")
        parser.add_argument("--base-url", help="Base URL of the OpenAI-compatible server")
        parser.add_argument("--model", help="Chat model name")
        parser.add_argument("--timeout", type=float, help="Provider request timeout in seconds")
        parser.add_argument("--top-k", type=int, help="Episodes per memory context")
        parser.add_argument("--similarity-threshold", type=float)
        parser.add_argument("--boundary-threshold", type=float)
        parser.add_argument("--max-buffer-size", type=int)
        parser.add_argument("--no-episodic-retrieval", action="store_true")
        parser.add_argument("--no-semantic-retrieval", action="store_true")
        parser.add_argument("--direct-extraction", action="store_true")

    def build_config(self, options):
        values = config_from_settings().to_dict()
        if options.get("config"):
            values.update(read_config_file(options["config"]))
        cfg = EngineConfig.from_dict(values).override(
            top_k_episodes=options.get("top_k"),
            similarity_threshold=options.get("similarity_threshold"),
            boundary_confidence_threshold=options.get("boundary_threshold"),
            max_buffer_size=options.get("max_buffer_size"),
            episodic_retrieval=False if options.get("no_episodic_retrieval") else None,
            semantic_retrieval=False if options.get("no_semantic_retrieval") else None,
            direct_extraction=True if options.get("direct_extraction") else None,
        )
        if options.get("top_k") and cfg.raw_text_episode_count > cfg.top_k_episodes:
            cfg = cfg.override(raw_text_episode_count=cfg.top_k_episodes)
        return validate_config(cfg)

    def build_provider(self, options):
        return build_provider(
            name=options.get("provider"),
            script=options.get("script"),
            base_url=options.get("base_url"),
            model=options.get("model"),
            timeout=options.get("timeout"),
        )

    def build_engine(self, options, **kwargs):
        kwargs.setdefault("max_workers", settings.MEMORY_LEARNING_WORKERS)
        return MemoryEngine(
            self.build_provider(options),
            cfg=self.build_config(options),
            store_root=options.get("store") or settings.MEMORY_STORE_ROOT or None,
            **kwargs,
        )

    def write_json(self, data):
        self.stdout.write(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except IngestError as exc:
            self.write_json(exc.report.to_dict())
            raise CommandError(str(exc))
        except (MemoryEngineError, ValidationError) as exc:
            raise CommandError("; ".join(getattr(exc, "messages", [str(exc)])))

    def run(self, **options):
        raise NotImplementedError
