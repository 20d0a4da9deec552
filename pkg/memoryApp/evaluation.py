"""Question-answering evaluation: token F1, BLEU-1 and an optional LLM judge.

Both metrics share one tokenizer: lowercase, punctuation replaced by spaces,
split on whitespace.
"""
import logging
import math
import string
import time
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .exceptions import MemoryEngineError
from .llm import ChatRequest, ResponseFormat, RoleTag, extract_json
from .prompts import render_prompt, render_template_file

logger = logging.getLogger(__name__)

PUNCTUATION_TABLE = str.maketrans(string.punctuation, " " * len(string.punctuation))
UNCATEGORIZED = "uncategorized"
OVERALL = "overall"
CORRECT_LABEL = "CORRECT"


def tokenize(text):
    return (text or "").lower().translate(PUNCTUATION_TABLE).split()


def token_f1(prediction, gold):
    """F1 over the multiset of shared tokens; 1 when both sides are empty"""
    predicted = tokenize(prediction)
    expected = tokenize(gold)
    if not predicted and not expected:
        return 1.0
    if not predicted or not expected:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(expected)).values())
    # Equal to 2PR / (P + R)
    return 2 * overlap / (len(predicted) + len(expected))


def bleu1(prediction, gold):
    """Clipped unigram precision times the brevity penalty exp(1 - r/c) when c < r"""
    predicted = tokenize(prediction)
    expected = tokenize(gold)
    if not predicted:
        return 1.0 if not expected else 0.0
    clipped = sum((Counter(predicted) & Counter(expected)).values())
    precision = clipped / len(predicted)
    c, r = len(predicted), len(expected)
    brevity_penalty = math.exp(1 - r / c) if c < r else 1.0
    return precision * brevity_penalty


@dataclass
class CaseResult:
    question: str
    gold_answer: str
    category: str
    user_id: str
    prediction: str = ""
    f1: float = 0.0
    bleu1: float = 0.0
    judge: int = None
    search_ms: float = None
    total_ms: float = None
    token_estimate: int = None
    error: str = None
    judge_error: str = None

    def to_dict(self):
        return {
            "question": self.question,
            "gold_answer": self.gold_answer,
            "category": self.category,
            "user_id": self.user_id,
            "prediction": self.prediction,
            "f1": self.f1,
            "bleu1": self.bleu1,
            "judge": self.judge,
            "search_ms": self.search_ms,
            "total_ms": self.total_ms,
            "token_estimate": self.token_estimate,
            "error": self.error,
            "judge_error": self.judge_error,
        }


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def summarize(results):
    """Means of every score and measurement over a group of case results"""
    judged = [r.judge for r in results if r.judge is not None]
    return {
        "count": len(results),
        "f1": _mean([r.f1 for r in results]),
        "bleu1": _mean([r.bleu1 for r in results]),
        "judge": _mean(judged),
        "search_ms": _mean([r.search_ms for r in results]),
        "total_ms": _mean([r.total_ms for r in results]),
        "token_estimate": _mean([r.token_estimate for r in results]),
        "errors": sum(1 for r in results if r.error),
    }


@dataclass
class EvalReport:
    cases: list
    categories: dict
    overall: dict

    def to_dict(self):
        return {
            "overall": self.overall,
            "categories": self.categories,
            "cases": [c.to_dict() for c in self.cases],
        }

    @classmethod
    def from_results(cls, results):
        groups = defaultdict(list)
        for result in results:
            groups[result.category or UNCATEGORIZED].append(result)
        return cls(
            cases=list(results),
            categories={name: summarize(group) for name, group in sorted(groups.items())},
            overall=summarize(results),
        )


def judge_answer(question, gold_answer, prediction, provider, template=None):
    """Asks the judge whether the prediction matches the gold answer.

    Args:
        template (str or Path): replacement for the default judge user prompt

    Returns:
        int: 1 for a CORRECT label, 0 otherwise
    """
    system_prompt, user_prompt = render_prompt(
        "judge", question=question, gold_answer=gold_answer, prediction=prediction
    )
    if template:
        user_prompt = render_template_file(
            template, question=question, gold_answer=gold_answer, prediction=prediction
        )
    request = ChatRequest(
        role_tag=RoleTag.JUDGE,
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        response_format=ResponseFormat.JSON_OBJECT,
        focus=question,
    )
    label = extract_json(provider.chat(request), "object").get("label", "")
    return int(str(label).strip().upper() == CORRECT_LABEL)


def evaluate_case(case, engine, user_id, answer_provider=None, judge_provider=None,
                  judge_template=None, top_k=None):
    """Answers and scores one case. A failure scores 0 and is annotated, never raised."""
    result = CaseResult(
        question=case.question,
        gold_answer=case.gold_answer,
        category=case.category,
        user_id=user_id,
    )
    start = time.perf_counter()
    try:
        context = engine.search(user_id, case.question, top_k)
        result.search_ms = (time.perf_counter() - start) * 1000
        result.token_estimate = context.token_estimate
        answer = engine.respond(user_id, case.question, context, answer_provider)
        result.total_ms = (time.perf_counter() - start) * 1000
    except (MemoryEngineError, ValidationError) as exc:
        result.error = str(exc)
        logger.warning(f"[{user_id}] Case failed: {case.question!r}: {exc}")
        return result
    result.prediction = answer.answer
    result.f1 = token_f1(answer.answer, case.gold_answer)
    result.bleu1 = bleu1(answer.answer, case.gold_answer)
    if judge_provider is not None:
        try:
            result.judge = judge_answer(
                case.question, case.gold_answer, answer.answer, judge_provider, judge_template
            )
        except MemoryEngineError as exc:
            result.judge = 0
            result.judge_error = str(exc)
            logger.warning(f"[{user_id}] Judge failed on {case.question!r}: {exc}")
    return result


def run_eval(cases, engine, user_id=None, answer_provider=None, judge_provider=None,
             judge_template=None, top_k=None):
    """Answers every case and aggregates means per category and overall.

    Args:
        cases (list): EvalCase list
        engine (MemoryEngine): pre-ingested engine
        user_id (str): user for cases that don't name one
        answer_provider (LLMProvider): backend for answers, the engine's when None
        judge_provider (LLMProvider): when given, every answer is also judged
        judge_template (str): external judge prompt template
        top_k (int): episodes in each context

    Returns:
        EvalReport: per-case results and aggregates
    """
    results = []
    for case in cases:
        owner = case.user_id or user_id
        if not owner:
            raise ValidationError(f"No user for case {case.question!r}")
        results.append(
            evaluate_case(case, engine, owner, answer_provider, judge_provider, judge_template, top_k)
        )
    report = EvalReport.from_results(results)
    logger.info(f"Evaluated {len(results)} cases, mean F1 {report.overall['f1']}")
    return report


def _cell(value, digits=4):
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def format_table(report):
    """Fixed-width table, one row per category then the overall row"""
    header = f"{'category':<24}{'n':>6}{'F1':>10}{'BLEU-1':>10}{'judge':>10}{'search_ms':>12}{'total_ms':>12}{'tokens':>10}"
    lines = [header, "-" * len(header)]
    rows = list(report.categories.items()) + [(OVERALL, report.overall)]
    for name, row in rows:
        lines.append(
            f"{name:<24}{row['count']:>6}{_cell(row['f1']):>10}{_cell(row['bleu1']):>10}"
            f"{_cell(row['judge']):>10}{_cell(row['search_ms'], 1):>12}{_cell(row['total_ms'], 1):>12}"
            f"{_cell(row['token_estimate'], 1):>10}"
        )
    return "\n".join(lines)
