"""Topology execution over one record, plus the dataset-level runner."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from masca import agents
from masca.agents import AgentOutput, AgentSpec, OUTPUT_ARTIFACT, artifact_text, run_agent
from masca.backend import (
    Backend,
    BackendError,
    ChatRequest,
    Message,
    ResponseCache,
    _objects,
    _strip_fences,
    complete,
)
from masca.dataset import (
    ApplicantRecord,
    AttributeSchema,
    CreditLabel,
    LabelParseError,
    parse_label,
    profile_text,
    render_structured,
)
from masca.features import compute_ratios, numericize, provenance_report, ratios_report

log = logging.getLogger(__name__)

SIGNAL_EPS = 1e-6
POSTERIOR_EPS = 1e-12
REWARD_FLOOR = 1e-6
COT_PREFIX = "Think step by step."
TOPOLOGIES = ("hierarchical3", "two_level", "flat", "single_agent_multitask", "zero_shot", "cot")

# score name -> (producing role, True when the score already measures default risk)
SIGNALS = {
    "context_confidence_score": ("contextualizer", False),
    "risk_score": ("risk_modeler", True),
    "income_stability_score": ("income_stability_analyst", False),
    "loan_feasibility_score": ("debt_analyst", False),
    "overall_reward_score": ("reward_modeler", False),
}
RISK_SIDE = {"risk_score": True, "income_stability_score": False, "loan_feasibility_score": False}


class PipelineError(RuntimeError):
    def __init__(self, message: str, partial: Transcript):
        super().__init__(message)
        self.partial = partial


class AggregationError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


# -- belief state -----------------------------------------------------------


def _clamp(p: float, eps: float) -> float:
    return min(max(p, eps), 1.0 - eps)


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class Observation:
    role: str
    signal: float
    weight: float


@dataclass(frozen=True)
class BeliefState:
    """Default-probability belief folded in log-odds space.

    The posterior is recomputed from the prior and the whole observation list
    with an exactly rounded sum, so it does not depend on observation order.
    """

    prior_default_prob: float = 0.3
    observations: tuple[Observation, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 < self.prior_default_prob < 1.0:
            raise ValueError("prior must lie in (0, 1)")

    @property
    def posterior_default_prob(self) -> float:
        terms = [logit(self.prior_default_prob)]
        terms += [o.weight * logit(_clamp(o.signal, SIGNAL_EPS)) for o in self.observations]
        return _clamp(_sigmoid(math.fsum(terms)), POSTERIOR_EPS)

    def to_json(self) -> dict[str, Any]:
        trajectory = []
        b = BeliefState(self.prior_default_prob)
        for o in self.observations:
            b = BeliefState(b.prior_default_prob, b.observations + (o,))
            trajectory.append(
                {"role": o.role, "signal": o.signal, "weight": o.weight, "posterior": b.posterior_default_prob}
            )
        return {
            "prior_default_prob": self.prior_default_prob,
            "trajectory": trajectory,
            "posterior_default_prob": self.posterior_default_prob,
        }

    def describe(self) -> str:
        lines = [
            f"Prior default probability: {self.prior_default_prob:.4f}",
            f"Posterior default probability: {self.posterior_default_prob:.4f}",
        ]
        if self.observations:
            lines.append("Observed default-risk signals:")
            lines += [f"- {o.role}: {o.signal:.4f} (weight {o.weight:g})" for o in self.observations]
        return "\n".join(lines)


def update_belief(b: BeliefState, role: str, signal: float, weight: float = 1.0) -> BeliefState:
    if not 0.0 <= signal <= 1.0:
        raise ValueError(f"signal must lie in [0, 1], got {signal}")
    if weight < 0:
        raise ValueError(f"weight must be non-negative, got {weight}")
    return BeliefState(b.prior_default_prob, b.observations + (Observation(role, float(signal), float(weight)),))


def default_risk_signal(score_name: str, value: float) -> float:
    """Orient a score so that higher means more likely to default."""
    return value if SIGNALS[score_name][1] else 1.0 - value


def observe_outputs(
    b: BeliefState, outputs: Iterable[AgentOutput], weights: Mapping[str, float] | None = None
) -> BeliefState:
    weights = weights or {}
    for out in outputs:
        if not out.valid:
            continue
        for name, value in out.scores.items():
            if name in SIGNALS:
                b = update_belief(b, out.role, default_risk_signal(name, value), weights.get(name, 1.0))
    return b


# -- risk/reward ---------------------------------------------------------------


@dataclass(frozen=True)
class RiskReward:
    ratio: float
    aggregate_risk: float
    reward: float
    components: dict[str, float]
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "ratio": self.ratio,
            "aggregate_risk": self.aggregate_risk,
            "reward": self.reward,
            "components": self.components,
            "flags": list(self.flags),
        }

    def describe(self) -> str:
        parts = ", ".join(f"{k} {v:.4f}" for k, v in self.components.items())
        lines = [
            f"Risk-reward ratio: {self.ratio:.4f}",
            f"Aggregate risk: {self.aggregate_risk:.4f} (from {parts})",
            f"Reward score: {self.reward:.4f}",
        ]
        lines += [f"Note: {f}" for f in self.flags]
        return "\n".join(lines)


def aggregate_risk_reward(
    outputs: Iterable[AgentOutput], weights: Mapping[str, float] | None = None
) -> RiskReward:
    """Weighted mean default risk over the risk-side scores, divided by the reward score."""
    weights = weights or {}
    risk: dict[str, float] = {}
    reward = None
    for out in outputs:
        if not out.valid:
            continue
        for name, value in out.scores.items():
            if name in RISK_SIDE:
                risk[name] = value if RISK_SIDE[name] else 1.0 - value
            elif name == "overall_reward_score":
                reward = value
    if not risk or reward is None:
        side = "risk" if not risk else "reward"
        raise AggregationError(f"no valid {side}-side score to aggregate")
    total_w = math.fsum(weights.get(k, 1.0) for k in risk)
    if total_w <= 0:
        raise AggregationError("risk-side weights sum to zero")
    agg = math.fsum(weights.get(k, 1.0) * v for k, v in risk.items()) / total_w
    flags = ()
    if reward < REWARD_FLOOR:
        flags = ("reward floor applied",)
    return RiskReward(
        ratio=agg / max(reward, REWARD_FLOOR),
        aggregate_risk=agg,
        reward=reward,
        components=dict(sorted(risk.items())),
        flags=flags,
    )


def decide_deterministic(
    ratio: float | None,
    posterior: float,
    tau: float = 1.0,
    p_star: float = 0.5,
) -> tuple[CreditLabel, float]:
    """Approve iff ratio <= tau and posterior <= p_star (inclusive).

    With no ratio available the posterior rule decides alone.
    """
    ratio_ok = True if ratio is None else ratio <= tau
    good = ratio_ok and posterior <= p_star
    margin = abs(posterior - p_star) + (0.0 if ratio is None else abs(ratio - tau))
    return (CreditLabel.GOOD if good else CreditLabel.BAD), min(margin, 1.0)


# -- scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    multipliers: dict[str, float]

    @classmethod
    def from_file(cls, path: str | Path) -> Scenario:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(name=str(data["shock_name"]), multipliers={k: float(v) for k, v in data["multipliers"].items()})


def _round_to(value: float, granularity: float) -> int | float:
    steps = Decimal(repr(value / granularity)).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    result = float(steps) * granularity
    return int(result) if float(granularity).is_integer() else result


def perturb_scenario(record: ApplicantRecord, scenario: Scenario, schema: AttributeSchema) -> ApplicantRecord:
    problems = []
    for attr_id, m in scenario.multipliers.items():
        if attr_id not in schema:
            problems.append(f"unknown attribute {attr_id}")
        elif schema[attr_id].categorical:
            problems.append(f"multiplier on categorical attribute {attr_id}")
        elif not m > 0:
            problems.append(f"multiplier for {attr_id} must be positive")
    if problems:
        raise ScenarioError("; ".join(problems))
    values = dict(record.values)
    for attr_id, m in scenario.multipliers.items():
        if attr_id in values:
            values[attr_id] = _round_to(values[attr_id] * m, schema[attr_id].granularity)
    return replace(record, id=f"{record.id}@{scenario.name}", values=values)


# -- transcripts -------------------------------------------------------------------


@dataclass
class Transcript:
    record_id: str
    topology: str
    config_name: str
    label: CreditLabel | None
    outputs: list[AgentOutput] = field(default_factory=list)
    belief: BeliefState | None = None
    risk_reward: dict[str, Any] | None = None
    decision: CreditLabel | None = None
    decision_source: str | None = None
    confidence: float | None = None
    notes: list[str] = field(default_factory=list)
    reply: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "config": self.config_name,
            "topology": self.topology,
            "label": self.label.value if self.label else None,
            "decision": self.decision.value if self.decision else None,
            "decision_source": self.decision_source,
            "confidence": self.confidence,
            "risk_reward": self.risk_reward,
            "belief": self.belief.to_json() if self.belief else None,
            "agents": [o.to_json() for o in self.outputs],
            "reply": self.reply,
            "notes": self.notes,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False)

    def timings(self) -> list[dict[str, Any]]:
        return [
            {
                "record_id": self.record_id,
                "config": self.config_name,
                "role": o.role,
                "latency_ms": o.latency_ms,
                "cached": o.cached,
                "attempts": o.attempts,
            }
            for o in self.outputs
        ]


@dataclass(frozen=True)
class Topology:
    kind: str
    model_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.kind!r}; expected one of {', '.join(TOPOLOGIES)}")


@dataclass
class PipelineConfig:
    schema: AttributeSchema
    prior: float = 0.3
    tau: float = 1.0
    p_star: float = 0.5
    belief_weights: dict[str, float] = field(default_factory=dict)
    rr_weights: dict[str, float] = field(default_factory=dict)
    temperature: float = 0.0
    max_tokens: int = 2048
    layer_workers: int = 4
    bucket_table: dict[str, Any] | None = None
    estimators: dict[str, Callable] | None = None
    catalog_path: str | None = None
    cache: ResponseCache | None = None
    config_name: str | None = None


def _thresholds_text(cfg: PipelineConfig) -> str:
    return (
        "Risk-reward ratio = aggregate default risk / reward score (higher is riskier).\n"
        f"Approve at or below risk-reward ratio: {cfg.tau:g}\n"
        f"Approve at or below posterior default probability: {cfg.p_star:g}"
    )


def _degraded(out: AgentOutput) -> str:
    return f"(not available: {out.role} output invalid: {'; '.join(out.violations)})"


class _Run:
    """State for one record under one topology."""

    def __init__(self, record, topology, backend, cfg: PipelineConfig):
        self.record = record
        self.topology = topology
        self.backend = backend
        self.cfg = cfg
        self.specs = agents.load_catalog(cfg.catalog_path, topology.model_map)
        self.transcript = Transcript(
            record_id=record.id,
            topology=topology.kind,
            config_name=cfg.config_name or topology.kind,
            label=record.label,
        )
        self.profile = profile_text(render_structured(record, cfg.schema))

    def layer(self, specs: Sequence[AgentSpec], context: Mapping[str, str]) -> list[AgentOutput]:
        def one(spec):
            return run_agent(
                spec, context, self.backend, self.cfg.cache,
                temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens,
            )

        workers = max(1, min(self.cfg.layer_workers, len(specs)))
        if workers == 1:
            outs = [one(s) for s in specs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(one, specs))
        self.transcript.outputs.extend(outs)
        return outs

    def single_call(self, tag: str, system: str, user: str) -> str:
        model = self.topology.model_map.get(tag) or self.topology.model_map.get("*") or "gpt-4o"
        request = ChatRequest(
            model_id=model,
            messages=(Message("system", system), Message("user", user)),
            temperature=self.cfg.temperature,
            max_tokens=self.cfg.max_tokens,
            tag=tag,
        )
        resp = complete(request, self.backend, self.cfg.cache)
        self.transcript.outputs.append(
            AgentOutput(tag, resp.text, None, {}, True, [], usage=resp.usage,
                        latency_ms=resp.latency_ms, cached=resp.cached)
        )
        return resp.text

    # -- shared finishing logic

    def finish(self, layer2: list[AgentOutput], optimizer: AgentOutput | None, orch: AgentOutput) -> None:
        t, cfg = self.transcript, self.cfg
        try:
            det = aggregate_risk_reward(layer2, cfg.rr_weights)
        except AggregationError as exc:
            det = None
            t.notes.append(f"deterministic risk-reward unavailable: {exc}")
        if optimizer is not None and optimizer.valid:
            ratio, source = optimizer.scores["risk_reward_ratio"], "agent"
        elif det is not None:
            ratio, source = det.ratio, "deterministic"
        else:
            ratio, source = None, "unavailable"
        t.risk_reward = {"ratio": ratio, "source": source, "deterministic": det.to_json() if det else None}

        posterior = t.belief.posterior_default_prob
        if orch.valid:
            t.decision = CreditLabel(orch.payload["decision"].strip().lower())
            t.confidence = orch.scores["confidence"]
            t.decision_source = "agent"
        else:
            t.decision, t.confidence = decide_deterministic(ratio, posterior, cfg.tau, cfg.p_star)
            t.decision_source = "deterministic"
            t.notes.append("decision_orchestrator invalid; deterministic decision used")

    def layer1_context(self) -> dict[str, str]:
        n = numericize(self.record, self.cfg.schema, self.cfg.bucket_table, self.cfg.estimators)
        ratios = ratios_report(compute_ratios(n))
        return {
            "raw_profile": self.profile,
            "computed_ratios": ratios + "\n\nInputs:\n" + provenance_report(n),
            "decision_thresholds": _thresholds_text(self.cfg),
        }

    def downstream(self, outs: list[AgentOutput], context: dict[str, str], fallbacks: Mapping[str, str]) -> None:
        for out in outs:
            name = OUTPUT_ARTIFACT.get(out.role)
            if name is None:
                continue
            context[name] = artifact_text(out) if out.valid else fallbacks.get(name, _degraded(out))

    def hierarchical(self, with_optimizer: bool) -> None:
        s, t, cfg = self.specs, self.transcript, self.cfg
        ctx = self.layer1_context()
        l1 = self.layer([s[r] for r in agents.ROLES if agents.LAYER_OF[r] == 1], ctx)
        self.downstream(l1, ctx, {"structured_profile": self.profile, "derived_features": ctx["computed_ratios"]})
        t.belief = observe_outputs(BeliefState(cfg.prior), l1, cfg.belief_weights)

        l2 = self.layer([s[r] for r in agents.ROLES if agents.LAYER_OF[r] == 2], ctx)
        self.downstream(l2, ctx, {})
        t.belief = observe_outputs(t.belief, l2, cfg.belief_weights)
        ctx["belief_state"] = t.belief.describe()

        optimizer = None
        if with_optimizer:
            optimizer = self.layer([s["risk_reward_optimizer"]], ctx)[0]
            self.downstream([optimizer], ctx, {})
            if not optimizer.valid:
                ctx["risk_reward_analysis"] = self._deterministic_rr_text(l2, prefix=_degraded(optimizer))
        else:
            ctx["risk_reward_analysis"] = self._deterministic_rr_text(l2)
        orch = self.layer([s["decision_orchestrator"]], ctx)[0]
        self.finish(l2, optimizer, orch)

    def _deterministic_rr_text(self, l2: list[AgentOutput], prefix: str = "") -> str:
        try:
            text = aggregate_risk_reward(l2, self.cfg.rr_weights).describe()
        except AggregationError as exc:
            text = f"Risk-reward ratio: not computable: {exc}"
        text = "Source: deterministic aggregate of the assessment scores\n" + text
        return f"{prefix}\n{text}" if prefix else text

    def flat(self) -> None:
        s, t, cfg = self.specs, self.transcript, self.cfg
        ctx = {"raw_profile": self.profile}
        flat_specs = [replace(s[r], input_selector=("raw_profile",)) for r in agents.ROLES]
        outs = self.layer(flat_specs, ctx)
        by_role = {o.role: o for o in outs}
        t.belief = observe_outputs(BeliefState(cfg.prior), outs, cfg.belief_weights)
        l2 = [by_role[r] for r in agents.ROLES if agents.LAYER_OF[r] == 2]
        self.finish(l2, by_role["risk_reward_optimizer"], by_role["decision_orchestrator"])

    def single_agent(self) -> None:
        t = self.transcript
        system = "\n\n".join(
            f"# Role: {role}\n{self.specs[role].system_prompt}" for role in agents.ROLES
        ) + (
            "\n\nYou are a single agent performing every role above in order. "
            "Finish with the Decision Orchestrator output."
        )
        text = self.single_call("single_agent_multitask", system, f"## Structured Profile\n{self.profile}")
        t.reply = text
        payload = _last_decision_object(text)
        if payload is not None:
            t.decision = CreditLabel(payload["decision"].strip().lower())
            conf = payload.get("confidence")
            if isinstance(conf, (int, float)) and not isinstance(conf, bool) and 0 <= conf <= 1:
                t.confidence = float(conf)
            t.decision_source = "agent"
        else:
            self._label_from_text(text)

    def baseline(self, cot: bool) -> None:
        system = agents.read_prompt("zero_shot.md")
        user = f"## Structured Profile\n{self.profile}"
        if cot:
            user = f"{COT_PREFIX}\n\n{user}"
        text = self.single_call(self.topology.kind, system, user)
        self.transcript.reply = text
        self._label_from_text(text)

    def _label_from_text(self, text: str) -> None:
        t = self.transcript
        try:
            t.decision = parse_label(text)
            t.decision_source = "parsed"
        except LabelParseError as exc:
            t.decision_source = "unparseable"
            t.notes.append(str(exc))

    def run(self) -> Transcript:
        kind = self.topology.kind
        if kind == "hierarchical3":
            self.hierarchical(with_optimizer=True)
        elif kind == "two_level":
            self.hierarchical(with_optimizer=False)
        elif kind == "flat":
            self.flat()
        elif kind == "single_agent_multitask":
            self.single_agent()
        else:
            self.baseline(cot=kind == "cot")
        return self.transcript


def _last_decision_object(text: str) -> dict[str, Any] | None:
    found = None
    for _, _, value in _objects(_strip_fences(text)):
        if isinstance(value, dict) and isinstance(value.get("decision"), str):
            if value["decision"].strip().lower() in ("good", "bad"):
                found = value
    return found


def run_pipeline(
    record: ApplicantRecord, topology: Topology, backend: Backend, config: PipelineConfig
) -> Transcript:
    run = _Run(record, topology, backend, config)
    try:
        return run.run()
    except BackendError as exc:
        run.transcript.notes.append(f"backend failure: {exc}")
        raise PipelineError(f"record {record.id}: {exc}", run.transcript) from exc


# -- dataset runner ---------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def completed_ids(path: Path) -> set[str]:
    done = set()
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                try:
                    done.add(json.loads(line)["record_id"])
                except (json.JSONDecodeError, KeyError):
                    continue
    return done


@dataclass
class RunSummary:
    completed: int
    skipped: int
    failed: list[str]


def run_dataset(
    records: Sequence[ApplicantRecord],
    topology: Topology,
    backend: Backend,
    config: PipelineConfig,
    run_dir: str | Path,
    workers: int = 4,
    resume: bool = False,
) -> RunSummary:
    """Run every record, appending each finished transcript as one line.

    On completion the file is rewritten in dataset order so its bytes do not
    depend on worker scheduling. Failed records land in ``errors.jsonl`` and
    are retried by a resumed run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tpath = run_dir / "transcripts.jsonl"
    timings_path = run_dir / "timings.jsonl"
    errors_path = run_dir / "errors.jsonl"
    done = completed_ids(tpath) if resume else set()
    if not resume:
        for p in (tpath, timings_path, errors_path):
            if p.exists():
                p.unlink()
    todo = [r for r in records if r.id not in done]
    lock = threading.Lock()
    failed: list[str] = []

    def work(rec: ApplicantRecord) -> None:
        try:
            t = run_pipeline(rec, topology, backend, config)
        except PipelineError as exc:
            with lock:
                failed.append(rec.id)
                with errors_path.open("a", encoding="utf-8") as f:
                    f.write(json.dumps({"error": str(exc), "partial": exc.partial.to_json()}, ensure_ascii=False) + "\n")
            return
        with lock:
            with tpath.open("a", encoding="utf-8") as f:
                f.write(t.to_line() + "\n")
                f.flush()
            with timings_path.open("a", encoding="utf-8") as f:
                for row in t.timings():
                    f.write(json.dumps(row) + "\n")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(work, todo))

    order = {r.id: i for i, r in enumerate(records)}
    if tpath.exists():
        lines = [l for l in tpath.read_text(encoding="utf-8").splitlines() if l.strip()]
        lines.sort(key=lambda l: order.get(json.loads(l)["record_id"], len(order)))
        _atomic_write(tpath, "".join(l + "\n" for l in lines))
    return RunSummary(completed=len(todo) - len(failed), skipped=len(done), failed=sorted(failed, key=order.get))


def load_transcripts(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
