"""Uniform analysis-module contract and the module registry.

Every analysis (built-in or user supplied) is described by a
:class:`ModuleDescriptor` and a run function ``fn(experiment, params) ->
ModuleResult``.  The registry validates parameters against the descriptor,
times the call and wraps the result in an :class:`AnalysisReport`.
"""

from __future__ import annotations

import abc
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .errors import DuplicateModule, InvalidParameter, UnknownModule, UnknownReportKind
from .preprocess import Experiment

SCHEMA_VERSION = "1.0"
REPORT_KINDS = ("anomaly", "leak", "correlation", "changepoint", "capacity", "idle", "custom")
PARAM_TYPES = ("int", "float", "string", "enum", "list")


def round_sig(x: float, digits: int = 4) -> float:
    """Round to ``digits`` significant digits (the display rule for narratives)."""
    x = float(x)
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


@dataclass(frozen=True)
class ParamSpec:
    key: str
    type: str
    default: Any
    description: str = ""
    choices: tuple = ()
    nullable: bool = False

    def __post_init__(self) -> None:
        if self.type not in PARAM_TYPES:
            raise ValueError(f"unknown parameter type {self.type!r}")
        if self.type == "enum" and not self.choices:
            raise ValueError(f"enum parameter {self.key!r} needs choices")
        self.validate(self.default)

    def validate(self, value: Any) -> Any:
        """Return the (normalized) value or raise InvalidParameter."""
        if value is None:
            if self.nullable:
                return None
            raise InvalidParameter(self.key, "may not be null")
        t = self.type
        if t == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidParameter(self.key, f"expected int, got {type(value).__name__}")
            return int(value)
        if t == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidParameter(self.key, f"expected float, got {type(value).__name__}")
            if not math.isfinite(value):
                raise InvalidParameter(self.key, "must be finite")
            return float(value)
        if t == "string":
            if not isinstance(value, str):
                raise InvalidParameter(self.key, f"expected string, got {type(value).__name__}")
            return value
        if t == "enum":
            if value not in self.choices:
                raise InvalidParameter(self.key, f"expected one of {list(self.choices)}, got {value!r}")
            return value
        if not isinstance(value, (list, tuple)):
            raise InvalidParameter(self.key, f"expected list, got {type(value).__name__}")
        return list(value)

    def coerce(self, text: str) -> Any:
        """Parse a command-line string into this parameter's type."""
        if text.lower() in ("null", "none") and self.nullable:
            return None
        try:
            if self.type == "int":
                return int(text)
            if self.type == "float":
                return float(text)
        except ValueError:
            raise InvalidParameter(self.key, f"cannot parse {text!r} as {self.type}") from None
        if self.type == "list":
            text = text.strip()
            if text.startswith("["):
                try:
                    return list(json.loads(text))
                except json.JSONDecodeError as exc:
                    raise InvalidParameter(self.key, f"bad JSON list: {exc.msg}") from None
            return [item.strip() for item in text.split(",") if item.strip()]
        return text

    def to_dict(self) -> dict[str, Any]:
        d = {
            "key": self.key,
            "type": self.type,
            "default": self.default,
            "description": self.description,
        }
        if self.choices:
            d["choices"] = list(self.choices)
        return d


@dataclass(frozen=True)
class ModuleDescriptor:
    name: str
    version: str
    parameter_schema: tuple[ParamSpec, ...]
    produces: str
    summary: str = ""

    def __post_init__(self) -> None:
        if self.produces not in REPORT_KINDS:
            raise UnknownReportKind(self.produces)
        keys = [p.key for p in self.parameter_schema]
        if len(keys) != len(set(keys)):
            raise ValueError(f"module {self.name!r} declares duplicate parameter keys")
        object.__setattr__(self, "parameter_schema", tuple(self.parameter_schema))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "produces": self.produces,
            "summary": self.summary,
            "parameters": [p.to_dict() for p in self.parameter_schema],
        }

    def param(self, key: str) -> ParamSpec:
        for p in self.parameter_schema:
            if p.key == key:
                return p
        raise InvalidParameter(key, f"unknown parameter for module {self.name!r}")

    def resolve(self, params: Mapping[str, Any] | None) -> dict[str, Any]:
        """Reject unknown keys, type-check supplied values, fill defaults."""
        params = dict(params or {})
        known = {p.key for p in self.parameter_schema}
        for key in params:
            if key not in known:
                raise InvalidParameter(key, f"unknown parameter for module {self.name!r}")
        resolved = {}
        for p in self.parameter_schema:
            value = params[p.key] if p.key in params else p.default
            resolved[p.key] = p.validate(value)
        return resolved


@dataclass
class ModuleResult:
    """What a module run function returns; the registry adds the bookkeeping."""

    findings: dict[str, Any]
    confidence: float
    narrative_seed: list[dict[str, Any]] = field(default_factory=list)


def narrative(template: str, **values: Any) -> dict[str, Any]:
    """A structured finding sentence: template id plus display-rounded values."""
    out = {}
    for k, v in values.items():
        if isinstance(v, float):
            v = round_sig(v)
        out[k] = v
    return {"template": template, "values": out}


@dataclass
class AnalysisReport:
    kind: str
    module: str
    version: str
    params_used: dict[str, Any]
    findings: dict[str, Any]
    confidence: float
    narrative_seed: list[dict[str, Any]] = field(default_factory=list)
    runtime_ms: int = 0

    def __post_init__(self) -> None:
        if self.kind not in REPORT_KINDS:
            raise UnknownReportKind(self.kind)
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_envelope(self) -> dict[str, Any]:
        """The versioned JSON envelope (run time excluded so reruns are byte-identical)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "module": {"name": self.module, "version": self.version},
            "params_used": self.params_used,
            "confidence": round_sig(self.confidence),
            "findings": self.findings,
            "narrative_seed": self.narrative_seed,
        }

    def to_json(self) -> str:
        return dumps_canonical(self.to_envelope())

    @classmethod
    def from_envelope(cls, data: Mapping[str, Any]) -> "AnalysisReport":
        kind = data.get("kind")
        if kind not in REPORT_KINDS:
            raise UnknownReportKind(f"unknown report kind {kind!r}")
        module = data["module"]
        return cls(
            kind=kind,
            module=module["name"],
            version=module["version"],
            params_used=dict(data.get("params_used", {})),
            findings=dict(data.get("findings", {})),
            confidence=float(data["confidence"]),
            narrative_seed=list(data.get("narrative_seed", [])),
        )


def _json_safe(obj: Any) -> Any:
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _json_safe(obj.tolist())
    if hasattr(obj, "item"):
        return _json_safe(obj.item())
    return obj


def dumps_canonical(obj: Any) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as null, trailing newline."""
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


RunFn = Callable[[Experiment, dict], ModuleResult]


class AnalysisModule(abc.ABC):
    """Base class for analysis modules.

    Subclasses declare :attr:`descriptor` and implement :meth:`analyze`;
    ``registry.register_module(MyModule())`` makes them runnable by name.
    """

    descriptor: ModuleDescriptor

    @abc.abstractmethod
    def analyze(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        """Run on a validated, fully-resolved parameter map."""

    def __call__(self, experiment: Experiment, params: dict[str, Any]) -> ModuleResult:
        return self.analyze(experiment, params)


@dataclass
class _Entry:
    descriptor: ModuleDescriptor
    run_fn: RunFn


class Registry:
    def __init__(self) -> None:
        self._entries: dict[str, _Entry] = {}

    def register(self, descriptor: ModuleDescriptor, run_fn: RunFn) -> _Entry:
        if descriptor.name in self._entries:
            raise DuplicateModule(f"module {descriptor.name!r} is already registered")
        entry = _Entry(descriptor, run_fn)
        self._entries[descriptor.name] = entry
        return entry

    def register_module(self, module: AnalysisModule) -> _Entry:
        return self.register(module.descriptor, module.analyze)

    def list_modules(self) -> list[ModuleDescriptor]:
        return [self._entries[k].descriptor for k in sorted(self._entries)]

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def descriptor(self, name: str) -> ModuleDescriptor:
        try:
            return self._entries[name].descriptor
        except KeyError:
            raise UnknownModule(f"unknown module {name!r}") from None

    def run(
        self, module_name: str, experiment: Experiment, params: Mapping[str, Any] | None = None
    ) -> AnalysisReport:
        try:
            entry = self._entries[module_name]
        except KeyError:
            raise UnknownModule(f"unknown module {module_name!r}") from None
        desc = entry.descriptor
        resolved = desc.resolve(params)
        start = time.perf_counter()
        result = entry.run_fn(experiment, dict(resolved))
        runtime_ms = int(round((time.perf_counter() - start) * 1000))
        confidence = min(1.0, max(0.0, float(result.confidence)))
        return AnalysisReport(
            kind=desc.produces,
            module=desc.name,
            version=desc.version,
            params_used=resolved,
            findings=_json_safe(result.findings),
            confidence=confidence,
            narrative_seed=_json_safe(result.narrative_seed),
            runtime_ms=runtime_ms,
        )


def list_modules(registry: Registry) -> list[ModuleDescriptor]:
    return registry.list_modules()


def run(
    registry: Registry,
    module_name: str,
    experiment: Experiment,
    params: Mapping[str, Any] | None = None,
) -> AnalysisReport:
    return registry.run(module_name, experiment, params)


def register(registry: Registry, descriptor: ModuleDescriptor, run_fn: RunFn) -> _Entry:
    return registry.register(descriptor, run_fn)


def select_metrics(experiment: Experiment, requested: Sequence[str]) -> list[str]:
    """Requested metric names (validated) or every metric when none requested."""
    if not requested:
        return experiment.metric_names
    unknown = [m for m in requested if m not in experiment.series]
    if unknown:
        raise InvalidParameter("metrics", f"unknown metrics {unknown}")
    return list(requested)
