"""Errors raised by the memory engine.

Input invariants (messages, configuration, request bodies) raise Django's
``ValidationError``; everything the engine itself can fail on derives from
``MemoryEngineError``.
"""


class MemoryEngineError(Exception):
    """Base class for engine failures"""


class TransportError(MemoryEngineError):
    """A provider call failed in a way that may succeed when retried"""


class ScriptingError(MemoryEngineError):
    """Strict scripted provider received a call no rule matches"""

    def __init__(self, role_tag, prompt_digest):
        self.role_tag = role_tag
        self.prompt_digest = prompt_digest
        super().__init__(
            f"No scripted rule matches role '{role_tag}' (prompt {prompt_digest})"
        )


class ResponseParseError(MemoryEngineError):
    """Provider output did not contain the expected JSON value"""


class DimensionMismatchError(MemoryEngineError):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"dimension mismatch: expected {expected}, got {actual}")


class UndefinedSimilarityError(MemoryEngineError):
    def __init__(self):
        super().__init__("undefined similarity: zero vector")


class StoreError(MemoryEngineError):
    """Persistence failure: I/O, unsupported version, malformed or duplicate records"""


class DrainTimeout(MemoryEngineError):
    def __init__(self, stuck_ids, timeout):
        self.stuck_ids = list(stuck_ids)
        self.timeout = timeout
        super().__init__(
            f"Learning pipeline not drained after {timeout}s; "
            f"stuck cycles: {', '.join(self.stuck_ids)}"
        )


class AnswerError(MemoryEngineError):
    """The answer provider failed; the assembled context is kept for inspection"""

    def __init__(self, message, context):
        self.context = context
        super().__init__(message)


class IngestError(MemoryEngineError):
    """Ingestion aborted; ``report`` holds the counts reached before the failure"""

    def __init__(self, message, report):
        self.report = report
        super().__init__(message)
