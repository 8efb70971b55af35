# Backend/app/core/errors.py
"""Exception hierarchy for the annotation service.

Every error carries an ``exit_code`` used by the CLI: 2 for usage and
validation problems, 3 when the pipeline has nothing to return and 4 when
the LLM backend cannot be reached.
"""
from typing import Any, Optional


class FaqAnnotationError(Exception):
    """Base class for all service errors."""

    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details = details


# --- Validation ---
class ValidationFailure(FaqAnnotationError):
    exit_code = 2


class DuplicateId(ValidationFailure):
    def __init__(self, faq_id: str):
        super().__init__(f"Duplicate FAQ id: {faq_id!r}", faq_id=faq_id)
        self.faq_id = faq_id


class EmptyQuestion(ValidationFailure):
    def __init__(self, index: int):
        super().__init__(f"FAQ at index {index} has an empty question", index=index)
        self.index = index


class EmptyCorpus(ValidationFailure):
    def __init__(self):
        super().__init__("FAQ corpus is empty")


class EmptyUtterance(ValidationFailure):
    def __init__(self, raw: str = ""):
        super().__init__("Utterance is empty after normalization", raw=raw)


class ConfigError(ValidationFailure):
    pass


class InsufficientTraining(ValidationFailure):
    def __init__(self, available: int, required: int):
        super().__init__(
            f"Need {required} distinct training examples for few-shot selection, got {available}",
            available=available,
            required=required,
        )
        self.available = available
        self.required = required


# --- Gateway ---
class GatewayError(FaqAnnotationError):
    exit_code = 4


class BackendUnavailable(GatewayError):
    pass


class GatewayTimeout(GatewayError):
    pass


class MissingReplayEntry(GatewayError):
    def __init__(self, digest: str):
        super().__init__(f"No replay entry for request digest {digest}", digest=digest)
        self.digest = digest


class NoMatch(GatewayError):
    def __init__(self, request_text: str):
        super().__init__(f"Scripted backend has no matcher for request: {request_text[:120]!r}")
        self.request_text = request_text


class DimensionMismatch(FaqAnnotationError):
    exit_code = 4

    def __init__(self, dimensions: Any):
        super().__init__(f"Embedding dimensions disagree: {dimensions}", dimensions=dimensions)


# --- Prompting ---
class PromptError(FaqAnnotationError):
    exit_code = 2


class PromptTooLarge(PromptError):
    def __init__(self, size: int, budget: int):
        super().__init__(f"Rendered prompt has {size} characters, budget is {budget}", size=size, budget=budget)
        self.size = size
        self.budget = budget


class Unparseable(PromptError):
    def __init__(self, raw: str):
        super().__init__(f"Response is not valid JSON: {raw[:200]!r}")
        self.raw = raw


class SchemaViolation(PromptError):
    def __init__(self, field: str, reason: Optional[str] = None):
        message = f"Schema violation on {field}" + (f": {reason}" if reason else "")
        super().__init__(message, field=field)
        self.field = field


class UnknownFaqTitle(PromptError):
    def __init__(self, titles: Any):
        super().__init__(f"None of the returned FAQ titles exist in the corpus: {titles}", titles=titles)
        self.titles = titles


# --- Pipeline ---
class AgentFailed(FaqAnnotationError):
    def __init__(self, name: str, cause: BaseException):
        super().__init__(f"Agent '{name}' failed: {cause}", agent=name)
        self.name = name
        self.cause = cause


class JudgeFailed(FaqAnnotationError):
    def __init__(self, cause: Any):
        super().__init__(f"Judge failed: {cause}")
        self.cause = cause


class NoCandidates(FaqAnnotationError):
    exit_code = 3

    def __init__(self, message: str = "No agent produced any candidate FAQ"):
        super().__init__(message)


def backend_failure(error: BaseException) -> Optional[GatewayError]:
    """The gateway error behind ``error``: itself, or the cause chained onto it."""
    if isinstance(error, GatewayError):
        return error
    if isinstance(error, NoCandidates) and isinstance(error.__cause__, GatewayError):
        return error.__cause__
    return None


def exit_code_for(error: FaqAnnotationError) -> int:
    return GatewayError.exit_code if backend_failure(error) is not None else error.exit_code


# --- Evaluation ---
class EmptyRuns(FaqAnnotationError):
    exit_code = 2

    def __init__(self):
        super().__init__("No runs to evaluate")


class EmptyInput(ValidationFailure):
    def __init__(self, what: str = "input"):
        super().__init__(f"Empty {what}")


class DanglingLink(ValidationFailure):
    def __init__(self, ref_id: str):
        super().__init__(f"Relevance link references missing id {ref_id!r}", ref_id=ref_id)
        self.ref_id = ref_id


class DatasetParseError(ValidationFailure):
    def __init__(self, line: int, reason: str):
        super().__init__(f"Line {line}: {reason}", line=line)
        self.line = line
