"""JSON state-machine flows and their action providers."""

from .definition import (
    END,
    FlowDefinition,
    FlowDefinitionError,
    StateDef,
    TemplateError,
    parse_definition,
    render,
    standard_flow,
    standard_flow_text,
)
from .engine import (
    FATAL,
    RETRYABLE,
    SUCCESS,
    ActionResult,
    ActionTimeout,
    FatalActionError,
    FlowEngine,
    FlowRun,
    RetryableActionError,
    StateRecord,
)

__all__ = [
    "END",
    "FATAL",
    "RETRYABLE",
    "SUCCESS",
    "ActionResult",
    "ActionTimeout",
    "FatalActionError",
    "FlowDefinition",
    "FlowDefinitionError",
    "FlowEngine",
    "FlowRun",
    "RetryableActionError",
    "StateDef",
    "StateRecord",
    "TemplateError",
    "parse_definition",
    "render",
    "standard_flow",
    "standard_flow_text",
]
