"""Exception hierarchy for the webrelay engine.

Every error carries a stable ``code`` string so CLI consumers can dispatch
on machine-readable codes instead of exception classes.
"""

from __future__ import annotations


class WebRelayError(Exception):
    """Base class for all engine errors."""

    code = "WebRelayError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# --- dom_core ---------------------------------------------------------------

class EmptyDocumentError(WebRelayError):
    code = "EmptyDocument"


class BadBaseUrlError(WebRelayError):
    code = "BadBaseUrl"


class UnknownNodeError(WebRelayError):
    code = "UnknownNode"


class SelectorSyntaxError(WebRelayError):
    code = "SelectorSyntax"


class ScopeMissingError(WebRelayError):
    code = "ScopeMissing"


class EmptySelectionError(WebRelayError):
    code = "EmptySelection"


class NotALinkError(WebRelayError):
    code = "NotALink"


# --- selector generation ----------------------------------------------------

class SelectorUngeneralizableError(WebRelayError):
    code = "SelectorUngeneralizable"


class NeedDistinctExamplesError(WebRelayError):
    code = "NeedDistinctExamples"


class ListTooDiffuseError(WebRelayError):
    code = "ListTooDiffuse"


class SelectorModelFailedError(WebRelayError):
    code = "SelectorModelFailed"


class NotInItemError(WebRelayError):
    code = "NotInItem"


# --- action DSL / recording -------------------------------------------------

class UnknownElementError(WebRelayError):
    code = "UnknownElement"


class BadNestingError(WebRelayError):
    code = "BadNesting"


class MissingFieldError(WebRelayError):
    code = "MissingField"


# --- record loop ------------------------------------------------------------

class PolicyParseFailureError(WebRelayError):
    code = "PolicyParseFailure"


class RecordBudgetExceededError(WebRelayError):
    code = "RecordBudgetExceeded"


class AgentFailedError(WebRelayError):
    """Raised when the policy issues a Fail action (CAPTCHA, 404, ...)."""

    code = "AgentFailed"

    def __init__(self, error_code: str, error_message: str = ""):
        super().__init__(f"{error_code}: {error_message}")
        self.error_code = error_code
        self.error_message = error_message


# --- model gateway ----------------------------------------------------------

class GatewayUnavailableError(WebRelayError):
    code = "GatewayUnavailable"


class GatewayProtocolError(WebRelayError):
    code = "GatewayProtocol"


class MissingRateError(WebRelayError):
    code = "MissingRate"


# --- replay -----------------------------------------------------------------

class RecordingCompileError(WebRelayError):
    code = "CompileError"


class PaginationDegenerateError(WebRelayError):
    code = "PaginationDegenerate"


# --- navigation -------------------------------------------------------------

class PageNotFoundError(WebRelayError):
    code = "PageNotFound"


class HttpFetchError(WebRelayError):
    code = "HttpError"

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"HTTP {status}")
        self.status = status


class ElementNotFoundError(WebRelayError):
    code = "ElementNotFound"


class InteractionUnsupportedError(WebRelayError):
    code = "InteractionUnsupported"


class NoHistoryError(WebRelayError):
    code = "NoHistory"


# --- evaluation -------------------------------------------------------------

class SchemaMismatchError(WebRelayError):
    code = "SchemaMismatch"


class EmptyEvalError(WebRelayError):
    code = "EmptyEval"
