"""Flow definitions: a JSON state machine whose states call action providers.

Parameter templates support two forms of path substitution, nothing else:

* a string that is exactly ``$.input.<key>`` or ``$.states.<name>.output.<key>...``
  is replaced by the referenced value (any JSON type);
* ``{$.path}`` inside a longer string is replaced by the value's text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

END = "END"
ACTION_TYPES = ("transfer", "compute")
DEFAULT_RETRIES = 2
DEFAULT_TIMEOUT = 300.0

_PATH = r"\$\.(?:input|states)(?:\.[A-Za-z0-9_\-]+)+"
_WHOLE = re.compile(rf"^{_PATH}$")
_EMBEDDED = re.compile(rf"\{{({_PATH})\}}")
_MISSING = object()


class FlowDefinitionError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid flow definition:\n  " + "\n  ".join(self.errors))


class TemplateError(KeyError):
    pass


@dataclass
class StateDef:
    name: str
    action_type: str
    parameters: dict
    next: str
    retries: int = DEFAULT_RETRIES
    timeout: float = DEFAULT_TIMEOUT


@dataclass
class FlowDefinition:
    id: str
    start_state: str
    states: dict[str, StateDef]
    inputs: dict[str, dict] = field(default_factory=dict)
    description: str = ""

    def required_inputs(self) -> list[str]:
        return [k for k, spec in self.inputs.items() if "default" not in spec]

    def resolve_input(self, given: dict) -> dict:
        """Apply declared defaults; raises TemplateError on missing required keys."""
        missing = [k for k in self.required_inputs() if k not in given]
        if missing:
            raise TemplateError(f"run input is missing required key(s): {', '.join(missing)}")
        out = {k: spec["default"] for k, spec in self.inputs.items() if "default" in spec}
        out.update(given)
        return out

    def path_from_start(self) -> list[str]:
        path, name = [], self.start_state
        while name != END:
            path.append(name)
            name = self.states[name].next
        return path


def _template_refs(value):
    if isinstance(value, str):
        if _WHOLE.match(value):
            yield value
        else:
            yield from _EMBEDDED.findall(value)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _template_refs(v)
    elif isinstance(value, list):
        for v in value:
            yield from _template_refs(v)


def _lookup(path: str, context: dict):
    node = context
    for part in path.split(".")[1:]:
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise TemplateError(f"template reference {path} does not resolve")
    return node


def render(value, context: dict):
    """Substitute template references in ``value`` from ``{"input": ..., "states": ...}``."""
    if isinstance(value, str):
        if _WHOLE.match(value):
            return _lookup(value, context)
        return _EMBEDDED.sub(lambda m: str(_lookup(m.group(1), context)), value)
    if isinstance(value, dict):
        return {k: render(v, context) for k, v in value.items()}
    if isinstance(value, list):
        return [render(v, context) for v in value]
    return value


def parse_definition(text_or_data) -> FlowDefinition:
    """Parse and validate; every violation is reported in one FlowDefinitionError."""
    if isinstance(text_or_data, (str, bytes)):
        try:
            data = json.loads(text_or_data)
        except json.JSONDecodeError as exc:
            raise FlowDefinitionError([f"not valid JSON: {exc}"]) from exc
    else:
        data = text_or_data
    errors = []
    if not isinstance(data, dict):
        raise FlowDefinitionError(["definition must be a JSON object"])
    states_raw = data.get("states")
    if not isinstance(states_raw, dict) or not states_raw:
        raise FlowDefinitionError(["definition has no states"])
    inputs = data.get("inputs", {})
    if isinstance(inputs, list):
        inputs = {k: {} for k in inputs}
    if not isinstance(inputs, dict):
        errors.append("inputs must be an object or a list of key names")
        inputs = {}

    states = {}
    for name, raw in states_raw.items():
        if not isinstance(raw, dict):
            errors.append(f"state {name!r}: must be an object")
            continue
        if name == END:
            errors.append(f"state name {END!r} is reserved")
        action = raw.get("action_type")
        if action not in ACTION_TYPES:
            errors.append(f"state {name!r}: unknown action_type {action!r} (expected one of {ACTION_TYPES})")
        nxt = raw.get("next")
        if not isinstance(nxt, str):
            errors.append(f"state {name!r}: missing 'next'")
        retries = raw.get("retries", DEFAULT_RETRIES)
        if not isinstance(retries, int) or isinstance(retries, bool) or retries < 0:
            errors.append(f"state {name!r}: retries must be an integer >= 0")
            retries = 0
        timeout = raw.get("timeout", DEFAULT_TIMEOUT)
        if not isinstance(timeout, (int, float)) or timeout <= 0:
            errors.append(f"state {name!r}: timeout must be > 0 seconds")
            timeout = DEFAULT_TIMEOUT
        params = raw.get("parameters", {})
        if not isinstance(params, dict):
            errors.append(f"state {name!r}: parameters must be an object")
            params = {}
        states[name] = StateDef(name, action, params, nxt, retries, float(timeout))

    for st in states.values():
        if isinstance(st.next, str) and st.next != END and st.next not in states_raw:
            errors.append(f"state {st.name!r}: next state {st.next!r} does not exist")
        for ref in _template_refs(st.parameters):
            parts = ref.split(".")
            if parts[1] == "input":
                if parts[2] not in inputs:
                    errors.append(f"state {st.name!r}: template {ref} uses undeclared input key {parts[2]!r}")
            else:
                if len(parts) < 4 or parts[3] != "output":
                    errors.append(f"state {st.name!r}: bad template {ref} (expected $.states.<name>.output...)")
                elif parts[2] not in states_raw:
                    errors.append(f"state {st.name!r}: template {ref} refers to unknown state {parts[2]!r}")

    start = data.get("start_state")
    if start not in states_raw:
        errors.append(f"start_state {start!r} does not exist")
    elif not errors:
        seen, name = [], start
        while name != END:
            if name in seen:
                cycle = seen[seen.index(name):]
                errors.append(f"state {name!r}: cycle {' -> '.join(cycle + [name])} never reaches {END}")
                break
            seen.append(name)
            name = states[name].next

    if errors:
        raise FlowDefinitionError(errors)
    return FlowDefinition(
        id=str(data.get("id", "flow")),
        start_state=start,
        states=states,
        inputs={k: dict(v or {}) for k, v in inputs.items()},
        description=str(data.get("description", "")),
    )


def standard_flow_text() -> str:
    return resources.files("fedptycho.flows").joinpath("ptycho_flow.json").read_text(encoding="utf-8")


def standard_flow() -> FlowDefinition:
    """The shipped three-state flow: transfer in, reconstruct, transfer out."""
    return parse_definition(standard_flow_text())
