from ..base import EngineCommand


class Command(EngineCommand):
    help = "Answers a question from a user's memory and prints the answer with its context"

    def add_arguments(self, parser):
        parser.add_argument("--user", required=True)
        parser.add_argument("--question", required=True)
        parser.add_argument("--context-only", action="store_true", help="Print the memory context without answering")
        parser.add_argument("--rendered", action="store_true", help="Print the rendered context block only")
        self.add_engine_arguments(parser)

    def run(self, **options):
        engine = self.build_engine(options)
        try:
            if options["context_only"] or options["rendered"]:
                context = engine.search(options["user"], options["question"])
                if options["rendered"]:
                    self.stdout.write(context.rendered, ending="")
                else:
                    self.write_json(context.to_dict())
                return
            self.write_json(engine.answer(options["user"], options["question"]).to_dict())
        finally:
            engine.close()
