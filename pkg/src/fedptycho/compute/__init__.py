"""Function-as-a-service compute endpoint with file-locked accelerator slots."""

from .endpoint import (
    ComputeEndpoint,
    FunctionRecord,
    FunctionRegistry,
    NodeAllocation,
    QueueDelayModel,
    TaskContext,
    TaskRecord,
    TaskRejected,
    UnknownFunctionError,
)
from .slots import SlotError, SlotFile, SlotTimeout, acquire_slots, release_slots

__all__ = [
    "ComputeEndpoint",
    "FunctionRecord",
    "FunctionRegistry",
    "NodeAllocation",
    "QueueDelayModel",
    "SlotError",
    "SlotFile",
    "SlotTimeout",
    "TaskContext",
    "TaskRecord",
    "TaskRejected",
    "UnknownFunctionError",
    "acquire_slots",
    "release_slots",
]
