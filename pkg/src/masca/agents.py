"""Agent roster: prompts, context assembly, output schemas and validation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from masca.backend import (
    Backend,
    ChatRequest,
    ExtractionError,
    Message,
    ResponseCache,
    Usage,
    complete,
    extract_json_detailed,
)

CORRECTIVE_INSTRUCTION = "Return only valid JSON matching the required format."

ROLES = (
    "data_analyst",
    "contextualizer",
    "feature_engineer",
    "risk_modeler",
    "income_stability_analyst",
    "debt_analyst",
    "reward_modeler",
    "risk_reward_optimizer",
    "decision_orchestrator",
)

LAYER_OF = {
    "data_analyst": 1,
    "contextualizer": 1,
    "feature_engineer": 1,
    "risk_modeler": 2,
    "income_stability_analyst": 2,
    "debt_analyst": 2,
    "reward_modeler": 2,
    "risk_reward_optimizer": 3,
    "decision_orchestrator": 4,
}

# Artifact name -> (heading, producing layer). Layer 0 means the engine
# supplies it directly (raw profile, deterministic ratios, config).
ARTIFACTS: dict[str, tuple[str, int]] = {
    "raw_profile": ("Structured Profile", 0),
    "computed_ratios": ("Computed Ratios", 0),
    "decision_thresholds": ("Decision Thresholds", 0),
    "structured_profile": ("Structured Profile", 1),
    "persona_report": ("Persona Report", 1),
    "derived_features": ("Derived Features", 1),
    "risk_assessment": ("Risk Assessment", 2),
    "income_assessment": ("Income Stability Assessment", 2),
    "debt_assessment": ("Debt Assessment", 2),
    "reward_assessment": ("Reward Assessment", 2),
    "belief_state": ("Belief State", 2),
    "risk_reward_analysis": ("Risk-Reward Analysis", 3),
}
ARTIFACT_ORDER = (
    "raw_profile",
    "structured_profile",
    "persona_report",
    "derived_features",
    "computed_ratios",
    "risk_assessment",
    "income_assessment",
    "debt_assessment",
    "reward_assessment",
    "risk_reward_analysis",
    "belief_state",
    "decision_thresholds",
)

OUTPUT_ARTIFACT = {
    "data_analyst": "structured_profile",
    "contextualizer": "persona_report",
    "feature_engineer": "derived_features",
    "risk_modeler": "risk_assessment",
    "income_stability_analyst": "income_assessment",
    "debt_analyst": "debt_assessment",
    "reward_modeler": "reward_assessment",
    "risk_reward_optimizer": "risk_reward_analysis",
}


class AgentInputError(KeyError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    kind: str  # text | score | list | object
    low: float | None = None
    high: float | None = None
    fields: SchemaDef | None = None
    choices: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("text", "score", "list", "object"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "score" and self.low is None:
            raise ValueError("score fields need an inclusive numeric range")

    def is_number(self, value: Any) -> bool:
        return not isinstance(value, bool) and isinstance(value, (int, float)) and math.isfinite(value)

    def in_range(self, value: Any) -> bool:
        return self.is_number(value) and value >= self.low and (self.high is None or value <= self.high)

    def range_text(self) -> str:
        hi = "∞)" if self.high is None else f"{self.high:g}]"
        return f"[{self.low:g},{hi}"


@dataclass(frozen=True)
class SchemaDef:
    fields: dict[str, FieldSpec]

    def violations(self, payload: Any, prefix: str = "") -> list[str]:
        if not isinstance(payload, dict):
            return [f"{prefix or 'payload'} must be a JSON object"]
        out = []
        for name, spec in self.fields.items():
            path = prefix + name
            if name not in payload:
                out.append(f"missing field '{path}'")
                continue
            value = payload[name]
            if spec.kind == "text":
                if not isinstance(value, str):
                    out.append(f"{path} must be text")
                elif spec.choices and value.strip().lower() not in spec.choices:
                    out.append(f"{path} must be one of {', '.join(spec.choices)}")
            elif spec.kind == "list":
                if not isinstance(value, list):
                    out.append(f"{path} must be a list")
            elif spec.kind == "object":
                if spec.fields is None:
                    if not isinstance(value, dict):
                        out.append(f"{path} must be an object")
                else:
                    out.extend(spec.fields.violations(value, prefix=path + "."))
            else:
                if not spec.is_number(value):
                    out.append(f"{path} must be a number")
                elif not spec.in_range(value):
                    out.append(f"{path} out of {spec.range_text()}")
        return out

    def scores(self, payload: Any) -> dict[str, float]:
        """In-range score values, keyed by leaf field name."""
        found: dict[str, float] = {}
        if not isinstance(payload, dict):
            return found
        for name, spec in self.fields.items():
            value = payload.get(name)
            if spec.kind == "object" and spec.fields is not None:
                found.update(spec.fields.scores(value))
            elif spec.kind == "score" and spec.in_range(value):
                found[name] = float(value)
        return found


def _text() -> FieldSpec:
    return FieldSpec("text")


def _unit() -> FieldSpec:
    return FieldSpec("score", 0.0, 1.0)


def _list() -> FieldSpec:
    return FieldSpec("list")


ROLE_SCHEMAS: dict[str, SchemaDef] = {
    "data_analyst": SchemaDef({"structured_data": _list()}),
    "contextualizer": SchemaDef(
        {
            "output_requirements": FieldSpec(
                "object",
                fields=SchemaDef(
                    {
                        "persona_report": _text(),
                        "explainability": _text(),
                        "context_confidence_score": _unit(),
                    }
                ),
            )
        }
    ),
    "feature_engineer": SchemaDef(
        {
            "derived_features and their respective values": _list(),
            "recommendations": _list(),
            "feature_report": _text(),
        }
    ),
    "risk_modeler": SchemaDef(
        {"pattern_analysis": _text(), "risk_score": _unit(), "recommendations": _list()}
    ),
    "income_stability_analyst": SchemaDef(
        {"income_analysis": _text(), "income_stability_score": _unit(), "recommendations": _list()}
    ),
    "debt_analyst": SchemaDef(
        {"debt_analysis": _text(), "loan_feasibility_score": _unit(), "recommendations": _list()}
    ),
    "reward_modeler": SchemaDef(
        {"profitability_assessment": _text(), "overall_reward_score": _unit(), "recommendations": _list()}
    ),
    "risk_reward_optimizer": SchemaDef(
        {
            "risk_reward_ratio": FieldSpec("score", 0.0, None),
            "risk_assessment": _text(),
            "reward_potential": _text(),
            "final_recommendation": _text(),
        }
    ),
    "decision_orchestrator": SchemaDef(
        {
            "decision": FieldSpec("text", choices=("good", "bad")),
            "confidence": _unit(),
            "rationale": _text(),
        }
    ),
}


@dataclass(frozen=True)
class AgentSpec:
    role: str
    layer: int
    system_prompt: str
    input_selector: tuple[str, ...]
    output_schema: SchemaDef
    model_id: str

    def __post_init__(self) -> None:
        if LAYER_OF.get(self.role) != self.layer:
            raise ValueError(f"{self.role} belongs to layer {LAYER_OF.get(self.role)}, not {self.layer}")
        for name in self.input_selector:
            if name not in ARTIFACTS:
                raise ValueError(f"{self.role}: unknown artifact {name!r}")
            produced = ARTIFACTS[name][1]
            if produced >= self.layer:
                raise ValueError(f"{self.role} (layer {self.layer}) cannot read {name} from layer {produced}")


@dataclass
class AgentOutput:
    role: str
    raw_text: str
    payload: Any
    scores: dict[str, float]
    valid: bool
    violations: list[str]
    notes: list[str] = field(default_factory=list)
    attempts: int = 1
    usage: Usage = field(default_factory=Usage)
    latency_ms: float = 0.0
    cached: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "raw_text": self.raw_text,
            "payload": self.payload,
            "scores": self.scores,
            "valid": self.valid,
            "violations": self.violations,
            "notes": self.notes,
            "attempts": self.attempts,
            "usage": self.usage.to_json(),
        }


def _prompt_dir():
    return resources.files("masca.data").joinpath("prompts")


def read_prompt(name: str, prompt_dir: str | Path | None = None) -> str:
    base = Path(prompt_dir) if prompt_dir is not None else _prompt_dir()
    return base.joinpath(name).read_text(encoding="utf-8")


def prompt_checksums(prompt_dir: str | Path | None = None) -> dict[str, str]:
    base = Path(prompt_dir) if prompt_dir is not None else _prompt_dir()
    out = {}
    for entry in sorted(base.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".md"):
            out[entry.name] = hashlib.sha256(entry.read_bytes()).hexdigest()
    return out


def load_catalog(
    path: str | Path | None = None,
    model_map: Mapping[str, str] | None = None,
) -> dict[str, AgentSpec]:
    """Agent specs keyed by role.

    ``model_map`` may hold ``"*"`` (global model) and per-role overrides; it
    wins over the catalog's own model entries.
    """
    if path is None:
        catalog = json.loads(_prompt_dir().joinpath("catalog.json").read_text("utf-8"))
        prompt_dir = None
    else:
        catalog = json.loads(Path(path).read_text(encoding="utf-8"))
        prompt_dir = Path(path).parent
    model_map = dict(model_map or {})
    default = model_map.get("*", catalog.get("default_model", "gpt-4o"))
    specs = {}
    for entry in catalog["agents"]:
        role = entry["role"]
        if role not in ROLE_SCHEMAS:
            raise ValueError(f"catalog names unknown role {role!r}")
        model = model_map.get(role) or (entry.get("model") if "*" not in model_map else None) or default
        specs[role] = AgentSpec(
            role=role,
            layer=int(entry["layer"]),
            system_prompt=read_prompt(entry["prompt"], prompt_dir),
            input_selector=tuple(entry["inputs"]),
            output_schema=ROLE_SCHEMAS[role],
            model_id=model,
        )
    missing = set(ROLES) - set(specs)
    if missing:
        raise ValueError("catalog is missing roles: " + ", ".join(sorted(missing)))
    return specs


def render_context(selector: tuple[str, ...], context: Mapping[str, str]) -> str:
    missing = [n for n in selector if n not in context]
    if missing:
        raise AgentInputError("missing upstream artifact(s): " + ", ".join(missing))
    ordered = sorted(selector, key=ARTIFACT_ORDER.index)
    return "\n\n".join(f"## {ARTIFACTS[n][0]}\n{context[n]}" for n in ordered)


def build_prompt(
    spec: AgentSpec,
    context: Mapping[str, str],
    *,
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> ChatRequest:
    return ChatRequest(
        model_id=spec.model_id,
        messages=(
            Message("system", spec.system_prompt),
            Message("user", render_context(spec.input_selector, context)),
        ),
        temperature=temperature,
        max_tokens=max_tokens,
        tag=spec.role,
    )


def validate_output(role: str, payload: Any, raw_text: str = "") -> AgentOutput:
    schema = ROLE_SCHEMAS[role]
    problems = schema.violations(payload)
    return AgentOutput(
        role=role,
        raw_text=raw_text,
        payload=payload,
        scores=schema.scores(payload),
        valid=not problems,
        violations=problems,
    )


def _parse(role: str, text: str) -> AgentOutput:
    try:
        ext = extract_json_detailed(text)
    except ExtractionError as exc:
        return AgentOutput(role, text, None, {}, False, [str(exc)])
    out = validate_output(role, ext.value, text)
    out.notes.extend(ext.notes)
    return out


def run_agent(
    spec: AgentSpec,
    context: Mapping[str, str],
    backend: Backend,
    cache: ResponseCache | None = None,
    *,
    temperature: float = 0.0,
    max_tokens: int = 2048,
) -> AgentOutput:
    """build_prompt -> complete -> extract_json -> validate, with one corrective retry."""
    request = build_prompt(spec, context, temperature=temperature, max_tokens=max_tokens)
    first = complete(request, backend, cache)
    out = _parse(spec.role, first.text)
    out.usage, out.latency_ms, out.cached = first.usage, first.latency_ms, first.cached
    if out.valid:
        return out

    retry = ChatRequest(
        model_id=request.model_id,
        messages=request.messages
        + (Message("assistant", first.text), Message("user", CORRECTIVE_INSTRUCTION)),
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        tag=request.tag,
    )
    second = complete(retry, backend, cache)
    out2 = _parse(spec.role, second.text)
    out2.attempts = 2
    out2.usage = Usage(
        first.usage.prompt_tokens + second.usage.prompt_tokens,
        first.usage.completion_tokens + second.usage.completion_tokens,
    )
    out2.latency_ms = first.latency_ms + second.latency_ms
    out2.cached = first.cached and second.cached
    if not out2.valid:
        out2.notes.insert(0, "first attempt: " + "; ".join(out.violations))
    return out2


def artifact_text(output: AgentOutput) -> str:
    """How an agent's output is shown to downstream agents."""
    return json.dumps(output.payload, indent=1, ensure_ascii=False, sort_keys=False)
