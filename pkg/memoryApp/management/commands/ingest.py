from ...engine import ingest
from ...transcripts import load_transcript
from ..base import EngineCommand


class Command(EngineCommand):
    help = "Streams transcript files through the memory engine and prints an ingest report"

    def add_arguments(self, parser):
        parser.add_argument("--transcript", action="append", required=True, help="Transcript JSON file (repeatable)")
        parser.add_argument("--user", help="Owner of the memories, the conversation id by default")
        parser.add_argument("--drain-timeout", type=float)
        self.add_engine_arguments(parser)

    def run(self, **options):
        transcripts = [load_transcript(path) for path in options["transcript"]]
        engine = self.build_engine(options)
        try:
            reports = [
                ingest(transcript, engine, user_id=options["user"], timeout=options["drain_timeout"])
                for transcript in transcripts
            ]
        finally:
            engine.close()
        self.write_json([report.to_dict() for report in reports])
