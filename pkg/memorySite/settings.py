"""
Django settings for memorySite project.

For more information on this file, see
https://docs.djangoproject.com/en/4.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
import os
import environ

env = environ.Env(
    # set casting, default value
    DEBUG=(bool, False),
    MEMORY_PROVIDER=(str, "scripted"),
    MEMORY_SCRIPT=(str, ""),
    MEMORY_STORE_ROOT=(str, ""),
    MEMORY_LOG_LEVEL=(str, "INFO"),
)
# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve(strict=True).parent.parent

env_file = os.path.join(BASE_DIR, ".env")
if os.path.exists(env_file):
    env.read_env(env_file)


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = env("SECRET_KEY", default="memory-site-insecure-development-key")

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = env("DEBUG")

ALLOWED_HOSTS = env.list("ALLOWED_HOSTS", default=["127.0.0.1", "localhost", "testserver"])
INTERNAL_IPS = ("127.0.0.1",)

# Application definition

INSTALLED_APPS = [
    "memoryApp.apps.MemoryappConfig",
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.middleware.common.CommonMiddleware",
]

ROOT_URLCONF = "memorySite.urls"

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            "context_processors": [],
        },
    },
]

WSGI_APPLICATION = "memorySite.wsgi.application"


# The stores are JSON-lines files (see memoryApp/persistence.py), no database is used
DATABASES = {}


# Internationalization
# https://docs.djangoproject.com/en/4.2/topics/i18n/

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.AutoField"


# Logging
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "memoryApp": {
            "handlers": ["console"],
            "level": env("MEMORY_LOG_LEVEL"),
            "propagate": False,
        },
    },
}


# Memory engine
MEMORY_BOUNDARY_THRESHOLD = env.float("MEMORY_BOUNDARY_THRESHOLD", default=0.7)
MEMORY_MAX_BUFFER_SIZE = env.int("MEMORY_MAX_BUFFER_SIZE", default=25)
MEMORY_SIMILARITY_THRESHOLD = env.float("MEMORY_SIMILARITY_THRESHOLD", default=0.0)
MEMORY_TOP_K = env.int("MEMORY_TOP_K", default=10)
MEMORY_SEMANTIC_MULTIPLIER = env.int("MEMORY_SEMANTIC_MULTIPLIER", default=2)
MEMORY_RAW_TEXT_EPISODES = env.int("MEMORY_RAW_TEXT_EPISODES", default=2)
MEMORY_LEARNING_LIMIT = env.int("MEMORY_LEARNING_LIMIT", default=20)
MEMORY_DETECTOR_CONTEXT_MESSAGES = env.int("MEMORY_DETECTOR_CONTEXT_MESSAGES", default=15)
MEMORY_DETECTOR_TOKEN_BUDGET = env.int("MEMORY_DETECTOR_TOKEN_BUDGET", default=3000)
MEMORY_EPISODIC_RETRIEVAL = env.bool("MEMORY_EPISODIC_RETRIEVAL", default=True)
MEMORY_SEMANTIC_RETRIEVAL = env.bool("MEMORY_SEMANTIC_RETRIEVAL", default=True)
MEMORY_DIRECT_EXTRACTION = env.bool("MEMORY_DIRECT_EXTRACTION", default=False)
MEMORY_DRAIN_TIMEOUT = env.float("MEMORY_DRAIN_TIMEOUT", default=300.0)
MEMORY_LEARNING_WORKERS = env.int("MEMORY_LEARNING_WORKERS", default=4)
MEMORY_STORE_ROOT = env("MEMORY_STORE_ROOT")
MEMORY_TOKEN_ESTIMATOR = env("MEMORY_TOKEN_ESTIMATOR", default="memoryApp.retrieval.estimate_tokens")

# Providers: "scripted" replays a script file, "http" talks to an OpenAI-compatible server
MEMORY_PROVIDER = env("MEMORY_PROVIDER")
MEMORY_SCRIPT = env("MEMORY_SCRIPT")
MEMORY_LLM_BASE_URL = env("MEMORY_LLM_BASE_URL", default="https://api.openai.com/v1")
MEMORY_LLM_MODEL = env("MEMORY_LLM_MODEL", default="gpt-4o-mini")
MEMORY_EMBEDDING_MODEL = env("MEMORY_EMBEDDING_MODEL", default="text-embedding-3-small")
MEMORY_LLM_TIMEOUT = env.float("MEMORY_LLM_TIMEOUT", default=60.0)
MEMORY_LLM_ATTEMPTS = env.int("MEMORY_LLM_ATTEMPTS", default=3)
MEMORY_LLM_BACKOFF = env.float("MEMORY_LLM_BACKOFF", default=0.5)
# Name of the environment variable holding the bearer token, never the token itself
MEMORY_LLM_API_KEY_ENV = env("MEMORY_LLM_API_KEY_ENV", default="OPENAI_API_KEY")
MEMORY_LLM_ROLE_MODELS = env.dict("MEMORY_LLM_ROLE_MODELS", default={})
MEMORY_LLM_TEMPERATURES = env.dict("MEMORY_LLM_TEMPERATURES", cast={"value": float}, default={})

# Bind address and threads of "manage.py serve"
MEMORY_BIND = env("MEMORY_BIND", default="127.0.0.1:8000")
MEMORY_SERVE_THREADS = env.int("MEMORY_SERVE_THREADS", default=8)
