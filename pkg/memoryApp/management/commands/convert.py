from ...transcripts import CONVERTERS, convert_file
from ..base import EngineCommand


class Command(EngineCommand):
    help = "Converts LoCoMo or LongMemEval files into transcript and evaluation-case files"

    def add_arguments(self, parser):
        parser.add_argument("--format", required=True, choices=sorted(CONVERTERS))
        parser.add_argument("--input", required=True)
        parser.add_argument("--output-dir", required=True)

    def run(self, **options):
        written = convert_file(options["input"], options["output_dir"], options["format"])
        self.stdout.write(f"Converted {len(written)} conversations into {options['output_dir']}")
