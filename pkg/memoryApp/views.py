"""JSON API of the memory engine.

Every endpoint works on the process-wide engine (``engine.get_engine``).
"""
import functools
import json
import logging

from django.core.exceptions import ValidationError
from django.core.paginator import EmptyPage, Paginator
from django.http import Http404, JsonResponse
from django.views.decorators.csrf import csrf_exempt
from django.views.decorators.http import require_GET, require_POST

from .engine import get_engine
from .exceptions import AnswerError, DrainTimeout, MemoryEngineError, TransportError
from .forms import AnswerForm, DrainForm, MessageForm, PageForm, SearchForm

logger = logging.getLogger(__name__)

DEFAULT_PAGE_SIZE = 50


def _error(message, status, **extra):
    return JsonResponse({"error": message, **extra}, status=status)


def _messages(exc):
    return exc.messages if hasattr(exc, "messages") else [str(exc)]


def api_view(view):
    """Maps engine errors to HTTP statuses: invalid input 400, unknown user 404,
    provider unreachable 503, drain timeout 504"""

    @csrf_exempt
    @functools.wraps(view)
    def wrapper(request, *args, **kwargs):
        try:
            return view(request, *args, **kwargs)
        except ValidationError as exc:
            return _error("invalid request", 400, details=_messages(exc))
        except Http404 as exc:
            return _error(str(exc) or "not found", 404)
        except AnswerError as exc:
            status = 503 if isinstance(exc.__cause__, TransportError) else 502
            return _error(str(exc), status, context=exc.context.to_dict())
        except TransportError as exc:
            return _error(f"provider unreachable: {exc}", 503)
        except DrainTimeout as exc:
            return _error(str(exc), 504, stuck=exc.stuck_ids)
        except MemoryEngineError as exc:
            logger.error(f"[{request.path}] Engine error: {exc}")
            return _error(str(exc), 500)

    return wrapper


def _json_body(request):
    try:
        data = json.loads(request.body or b"{}")
    except ValueError:
        raise ValidationError("Request body is not valid JSON")
    if not isinstance(data, dict):
        raise ValidationError("Request body must be a JSON object")
    return data


def _valid_form(form_class, data):
    form = form_class(data)
    if not form.is_valid():
        raise ValidationError([f"{field}: {error}" for field, errors in form.errors.items() for error in errors])
    return form


def _known_user(engine, user_id):
    if not engine.has_user(user_id):
        raise Http404(f"Unknown user: {user_id}")


@api_view
@require_POST
def append_message(request, user_id):
    """Appends one message to the user's stream.

    Body: {"role": "user" | "assistant", "content": "...", "timestamp": "ISO-8601"}
    """
    form = _valid_form(MessageForm, _json_body(request))
    result = get_engine().append_message(user_id, form.to_message())
    return JsonResponse(result.to_dict())


@api_view
@require_POST
def flush_session(request, user_id):
    """Ends the user's session"""
    result = get_engine().flush_session(user_id)
    return JsonResponse(result.to_dict())


@api_view
@require_POST
def search(request, user_id):
    """Memory context for a query. Body: {"query": "...", "k": 10}"""
    form = _valid_form(SearchForm, _json_body(request))
    context = get_engine().search(user_id, form.cleaned_data["query"], form.cleaned_data["k"])
    return JsonResponse(context.to_dict())


@api_view
@require_POST
def answer(request, user_id):
    """Answer plus the context it was built from. Body: {"question": "...", "k": 10}"""
    form = _valid_form(AnswerForm, _json_body(request))
    result = get_engine().answer(user_id, form.cleaned_data["question"], form.cleaned_data["k"])
    return JsonResponse(result.to_dict())


@api_view
@require_POST
def drain(request):
    """Waits for the learning pipeline. Body: {"user_id": optional, "timeout": seconds}"""
    form = _valid_form(DrainForm, _json_body(request))
    engine = get_engine()
    user_id = form.cleaned_data["user_id"] or None
    engine.drain(user_id, form.cleaned_data["timeout"])
    return JsonResponse({"drained": True, "pending": engine.pipeline.pending(user_id)})


def _page(request, items, key):
    form = _valid_form(PageForm, request.GET)
    paginator = Paginator(items, form.cleaned_data["page_size"] or DEFAULT_PAGE_SIZE)
    try:
        page = paginator.page(form.cleaned_data["page"] or 1)
    except EmptyPage:
        raise Http404("Page out of range")
    return JsonResponse(
        {
            key: [item.to_dict() for item in page.object_list],
            "page": page.number,
            "num_pages": paginator.num_pages,
            "count": paginator.count,
        }
    )


@api_view
@require_GET
def episodes(request, user_id):
    """Stored episodes of a user, oldest first, paginated"""
    engine = get_engine()
    _known_user(engine, user_id)
    return _page(request, engine.episodes(user_id), "episodes")


@api_view
@require_GET
def facts(request, user_id):
    """Stored facts of a user, oldest first, paginated"""
    engine = get_engine()
    _known_user(engine, user_id)
    return _page(request, engine.facts(user_id), "facts")


def handler404(request, exception):
    """Responds to the 404 exception with JSON"""
    return _error(str(exception) or "not found", 404)
