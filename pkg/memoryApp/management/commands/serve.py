from django.conf import settings
from django.core.wsgi import get_wsgi_application
from gunicorn.app.base import BaseApplication

from ...engine import set_engine
from ..base import EngineCommand


class MemoryServer(BaseApplication):
    """Runs the WSGI application inside gunicorn with the given options"""

    def __init__(self, application, options):
        self.application = application
        self.options = options
        super().__init__()

    def load_config(self):
        for key, value in self.options.items():
            if key in self.cfg.settings and value is not None:
                self.cfg.set(key, value)

    def load(self):
        return self.application


class Command(EngineCommand):
    help = "Serves the memory API over HTTP"

    def add_arguments(self, parser):
        parser.add_argument("--bind", help="host:port to listen on")
        parser.add_argument("--threads", type=int, help="Request threads")
        self.add_engine_arguments(parser)

    def run(self, **options):
        set_engine(self.build_engine(options))
        # One process holds every user's buffers: concurrency comes from threads
        server = MemoryServer(
            get_wsgi_application(),
            {
                "bind": options["bind"] or settings.MEMORY_BIND,
                "workers": 1,
                "worker_class": "gthread",
                "threads": options["threads"] or settings.MEMORY_SERVE_THREADS,
            },
        )
        server.run()
