from ...engine import ingest
from ...evaluation import format_table, run_eval
from ...transcripts import load_cases, load_transcript, write_json
from ..base import EngineCommand


class Command(EngineCommand):
    help = "Answers evaluation cases from memory and reports F1 and BLEU-1 per category"

    def add_arguments(self, parser):
        parser.add_argument("--cases", required=True, help="Evaluation case JSON file")
        parser.add_argument("--report", required=True, help="Where to write the JSON report")
        parser.add_argument("--user", help="User for cases that don't name one")
        parser.add_argument("--transcript", action="append", help="Ingest these transcripts first")
        parser.add_argument("--judge", action="store_true", help="Also score answers with the judge role")
        parser.add_argument("--judge-template", help="Replacement judge prompt template")
        self.add_engine_arguments(parser)

    def run(self, **options):
        cases = load_cases(options["cases"])
        engine = self.build_engine(options)
        try:
            for path in options["transcript"] or []:
                ingest(load_transcript(path), engine, user_id=options["user"])
            report = run_eval(
                cases,
                engine,
                user_id=options["user"],
                judge_provider=engine.provider if options["judge"] or options["judge_template"] else None,
                judge_template=options["judge_template"],
            )
        finally:
            engine.close()
        write_json(options["report"], report.to_dict())
        self.stdout.write(format_table(report))
