from __future__ import annotations

import json
import math
import random
import threading
import time

import pytest
from hypothesis import given, strategies as st

from masca import agents
from masca.agents import validate_output
from masca.backend import ScriptedBackend
from masca.dataset import ApplicantRecord, CreditLabel
from masca.orchestrator import (
    COT_PREFIX,
    AggregationError,
    BeliefState,
    PipelineConfig,
    PipelineError,
    Scenario,
    ScenarioError,
    Topology,
    aggregate_risk_reward,
    decide_deterministic,
    load_transcripts,
    observe_outputs,
    perturb_scenario,
    run_dataset,
    run_pipeline,
    update_belief,
)
from payloads import ACCEPTING, valid_script

# -- belief --------------------------------------------------------------------------


def fold(prior, obs):
    b = BeliefState(prior)
    for role, s, w in obs:
        b = update_belief(b, role, s, w)
    return b.posterior_default_prob


def random_obs(rng, n=None):
    return [
        (f"r{i}", rng.random(), rng.choice([0.0, 0.5, 1.0, rng.uniform(0, 3)]))
        for i in range(n if n is not None else rng.randint(1, 9))
    ]


def test_empty_fold_returns_prior():
    assert BeliefState(0.3).posterior_default_prob == pytest.approx(0.3, abs=1e-15)


@given(st.floats(0.01, 0.99), st.floats(0, 5))
def test_neutral_signal_is_noop(prior, weight):
    assert fold(prior, [("x", 0.5, weight)]) == pytest.approx(prior, abs=1e-12)


def test_even_prior_takes_signal():
    assert fold(0.5, [("x", 0.8, 1.0)]) == pytest.approx(0.8, abs=1e-12)


def test_order_invariance_1000_permutations():
    rng = random.Random(5)
    for _ in range(1000):
        obs = random_obs(rng)
        prior = rng.uniform(0.01, 0.99)
        shuffled = obs[:]
        rng.shuffle(shuffled)
        assert abs(fold(prior, obs) - fold(prior, shuffled)) <= 1e-12


def test_monotone_in_each_signal():
    rng = random.Random(6)
    for _ in range(1000):
        obs = random_obs(rng)
        prior = rng.uniform(0.01, 0.99)
        i = rng.randrange(len(obs))
        role, s, w = obs[i]
        higher = obs[:]
        higher[i] = (role, rng.uniform(s, 1.0), w)
        assert fold(prior, higher) >= fold(prior, obs)


def test_extreme_signals_stay_finite():
    p = fold(0.3, [("a", 1.0, 1.0)] * 50)
    assert 0 < p < 1 and math.isfinite(p)
    assert fold(0.3, [("a", 0.0, 1.0)] * 50) >= 1e-12


def test_update_validation():
    with pytest.raises(ValueError):
        update_belief(BeliefState(), "x", 1.2)
    with pytest.raises(ValueError):
        update_belief(BeliefState(), "x", 0.5, -1)
    with pytest.raises(ValueError):
        BeliefState(1.0)


def test_observe_outputs_orients_scores():
    outs = [validate_output(r, ACCEPTING[r]) for r in ("contextualizer", "risk_modeler", "debt_analyst")]
    b = observe_outputs(BeliefState(0.3), outs)
    assert [(o.role, round(o.signal, 9)) for o in b.observations] == [
        ("contextualizer", 0.2),
        ("risk_modeler", 0.7),
        ("debt_analyst", 0.4),
    ]


# -- risk/reward and decisions --------------------------------------------------------


def assessments(risk, stability, feasibility, reward):
    payloads = {
        "risk_modeler": dict(ACCEPTING["risk_modeler"], risk_score=risk),
        "income_stability_analyst": dict(ACCEPTING["income_stability_analyst"], income_stability_score=stability),
        "debt_analyst": dict(ACCEPTING["debt_analyst"], loan_feasibility_score=feasibility),
        "reward_modeler": dict(ACCEPTING["reward_modeler"], overall_reward_score=reward),
    }
    return [validate_output(r, p) for r, p in payloads.items()]


def test_aggregate_example():
    rr = aggregate_risk_reward(assessments(0.6, 0.6, 0.5, 0.5))
    assert rr.aggregate_risk == pytest.approx(0.5, abs=1e-12)
    assert rr.ratio == pytest.approx(1.0, abs=1e-12)


def test_aggregate_boundaries():
    assert aggregate_risk_reward(assessments(0.0, 1.0, 1.0, 1.0)).ratio == 0.0
    rr = aggregate_risk_reward(assessments(0.6, 0.6, 0.5, 0.0))
    assert rr.ratio == pytest.approx(0.5 / 1e-6) and math.isfinite(rr.ratio)
    assert rr.flags == ("reward floor applied",)


def test_aggregate_weights_and_missing():
    rr = aggregate_risk_reward(assessments(1.0, 1.0, 1.0, 0.5), {"risk_score": 2.0})
    assert rr.aggregate_risk == pytest.approx(2 / 4)
    with pytest.raises(AggregationError, match="reward"):
        aggregate_risk_reward(assessments(0.5, 0.5, 0.5, 0.5)[:3])


@pytest.mark.parametrize(
    "ratio, posterior, label, conf",
    [
        (1.0, 0.5, CreditLabel.GOOD, 0.0),
        (2.0, 0.9, CreditLabel.BAD, 1.0),
        (0.2, 0.1, CreditLabel.GOOD, 1.0),
        (0.9, 0.45, CreditLabel.GOOD, 0.15),
        (1.1, 0.1, CreditLabel.BAD, 0.5),
        (None, 0.3, CreditLabel.GOOD, 0.2),
    ],
)
def test_decide_deterministic(ratio, posterior, label, conf):
    got, c = decide_deterministic(ratio, posterior)
    assert got is label
    assert c == pytest.approx(conf, abs=1e-12)


# -- scenarios ------------------------------------------------------------------------


def test_scenario_scaling(schema, records10):
    rec = ApplicantRecord("a", dict(records10[0].values, X5=2000))
    out = perturb_scenario(rec, Scenario("up", {"X5": 1.25}), schema)
    assert out.values["X5"] == 2500 and out.id == "a@up"
    same = perturb_scenario(rec, Scenario("id", {"X5": 1.0, "X2": 1.0}), schema)
    assert same.values == rec.values and same.label == rec.label


def test_scenario_rounds_half_up(schema, records10):
    rec = ApplicantRecord("a", dict(records10[0].values, X5=1001))
    assert perturb_scenario(rec, Scenario("s", {"X5": 1.5}), schema).values["X5"] == 1502


def test_scenario_validation(schema, records10):
    with pytest.raises(ScenarioError) as e:
        perturb_scenario(records10[0], Scenario("bad", {"X1": 2.0, "X99": 1.0, "X5": 0.0}), schema)
    msg = str(e.value)
    assert "X1" in msg and "X99" in msg and "X5" in msg


def test_downturn_fixture_end_to_end(schema, records10, fixtures_dir, recording, tmp_path):
    scenario = Scenario.from_file(fixtures_dir / "downturn.json")
    shocked = [perturb_scenario(r, scenario, schema) for r in records10[:3]]
    assert shocked[0].values["X5"] == round(records10[0].values["X5"] * 1.2)
    summary = run_dataset(shocked, Topology("hierarchical3"), recording, PipelineConfig(schema), tmp_path)
    assert summary.completed == 3
    ids = [t["record_id"] for t in load_transcripts(tmp_path / "transcripts.jsonl")]
    assert ids == [f"fx-000{i}@downturn" for i in (1, 2, 3)]


# -- structural topology suite -------------------------------------------------------


class EventBackend(ScriptedBackend):
    """Logs request start/end events; layer-1 calls are slowed to expose barrier leaks."""

    def __init__(self, script):
        super().__init__(script)
        self.events = []
        self.requests = []
        self._lock = threading.Lock()

    def send(self, request):
        with self._lock:
            self.events.append(("start", request.tag))
            self.requests.append(request)
        if agents.LAYER_OF.get(request.tag) == 1:
            time.sleep(0.01 * (1 + agents.ROLES.index(request.tag)))
        resp = super().send(request)
        with self._lock:
            self.events.append(("end", request.tag))
        return resp


def run_one(kind, record, schema, backend=None, **cfg):
    backend = backend or EventBackend(valid_script())
    t = run_pipeline(record, Topology(kind), backend, PipelineConfig(schema, **cfg))
    return t, backend


def assert_barriers(events):
    layer = lambda tag: agents.LAYER_OF[tag]  # noqa: E731
    for i, (kind, tag) in enumerate(events):
        if kind != "start":
            continue
        for kind2, tag2 in events[i:]:
            if kind2 == "end":
                assert layer(tag2) >= layer(tag), f"{tag2} finished after {tag} started"


def test_hierarchical3_structure(schema, records10):
    t, be = run_one("hierarchical3", records10[0], schema)
    assert len(be.requests) == 9
    assert [o.role for o in t.outputs] == list(agents.ROLES)
    assert_barriers(be.events)
    assert t.decision is CreditLabel.GOOD and t.decision_source == "agent"
    assert t.confidence == 0.9
    assert t.risk_reward["source"] == "agent" and t.risk_reward["ratio"] == 1.4
    orch = be.requests[-1]
    assert orch.tag == "decision_orchestrator" and orch.model_id == "o3-mini"
    heads = [l for l in orch.messages[1].content.splitlines() if l.startswith("## ")]
    assert heads == [
        "## Risk Assessment",
        "## Income Stability Assessment",
        "## Debt Assessment",
        "## Reward Assessment",
        "## Risk-Reward Analysis",
        "## Belief State",
    ]


def test_two_level_structure(schema, records10):
    t, be = run_one("two_level", records10[0], schema)
    assert len(be.requests) == 8
    assert "risk_reward_optimizer" not in [r.tag for r in be.requests]
    assert_barriers(be.events)
    user = be.requests[-1].messages[1].content
    assert "## Risk-Reward Analysis\nSource: deterministic aggregate" in user
    assert t.risk_reward["source"] == "deterministic"


def test_flat_contexts_hold_only_raw_profile(schema, records10):
    t, be = run_one("flat", records10[0], schema)
    assert len(be.requests) == 9
    for r in be.requests:
        user = r.messages[1].content
        assert [l for l in user.splitlines() if l.startswith("## ")] == ["## Structured Profile"]
        assert "Computed Ratios" not in user and "Belief" not in user
    assert t.decision is CreditLabel.GOOD


@pytest.mark.parametrize("kind", ["zero_shot", "cot", "single_agent_multitask"])
def test_single_call_topologies(kind, schema, records10):
    script = {("*", "*"): "Weighing everything.\nDecision: bad"}
    if kind == "single_agent_multitask":
        script = {("*", "*"): '{"risk_score": 0.2}\n{"decision": "bad", "confidence": 0.7, "rationale": "r"}'}
    t, be = run_one(kind, records10[0], schema, EventBackend(script))
    assert len(be.requests) == 1
    user = be.requests[0].messages[1].content
    assert user.startswith(COT_PREFIX) == (kind == "cot")
    assert t.decision is CreditLabel.BAD
    assert t.decision_source == ("agent" if kind == "single_agent_multitask" else "parsed")


def test_single_agent_prompt_concatenates_roles(schema, records10):
    _, be = run_one("single_agent_multitask", records10[0], schema, EventBackend({("*", "*"): "good"}))
    system = be.requests[0].messages[0].content
    for role in agents.ROLES:
        assert f"# Role: {role}" in system


def test_unparseable_baseline_is_recorded(schema, records10):
    t, _ = run_one("zero_shot", records10[0], schema, EventBackend({("*", "*"): "hard to say"}))
    assert t.decision is None and t.decision_source == "unparseable"
    assert "unparseable" in t.notes[0]


def test_invalid_orchestrator_falls_back(schema, records10):
    script = valid_script()
    script[("decision_orchestrator", "*")] = "no idea"
    t, be = run_one("hierarchical3", records10[0], schema, EventBackend(script))
    assert len(be.requests) == 10  # one corrective retry
    assert t.decision_source == "deterministic"
    # ratio 1.4 from the optimizer exceeds tau = 1
    assert t.decision is CreditLabel.BAD


def test_invalid_layer1_uses_fallback_artifacts(schema, records10):
    script = valid_script()
    script[("data_analyst", "*")] = "prose only"
    t, be = run_one("hierarchical3", records10[0], schema, EventBackend(script))
    l2 = [r for r in be.requests if r.tag == "risk_modeler"][0].messages[1].content
    assert "## Structured Profile\nX1 Status of existing checking account" in l2
    assert t.decision is CreditLabel.GOOD


def test_backend_failure_keeps_partial_transcript(schema, records10):
    script = valid_script()
    del script[("*", "*")]
    del script[("reward_modeler", "*")]
    with pytest.raises(PipelineError) as e:
        run_one("hierarchical3", records10[0], schema, EventBackend(script))
    assert "reward_modeler" in str(e.value)
    assert [o.role for o in e.value.partial.outputs][:3] == list(agents.ROLES[:3])


def test_thresholds_reach_optimizer(schema, records10):
    _, be = run_one("hierarchical3", records10[0], schema, tau=0.8, p_star=0.4)
    user = [r for r in be.requests if r.tag == "risk_reward_optimizer"][0].messages[1].content
    assert "Approve at or below risk-reward ratio: 0.8" in user
    assert "posterior default probability: 0.4" in user


# -- dataset runs --------------------------------------------------------------------


def test_run_dataset_byte_identical(schema, records10, recording, tmp_path):
    cfg = PipelineConfig(schema)
    for d in ("a", "b"):
        run_dataset(records10, Topology("hierarchical3"), recording, cfg, tmp_path / d, workers=4)
    a = (tmp_path / "a" / "transcripts.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "transcripts.jsonl").read_bytes()
    assert [json.loads(l)["record_id"] for l in a.decode().splitlines()] == [r.id for r in records10]


def test_cache_replay_identical(schema, records10, recording, tmp_path):
    from masca.backend import ResponseCache

    cfg = PipelineConfig(schema, cache=ResponseCache(tmp_path / "cache"))
    run_dataset(records10[:3], Topology("hierarchical3"), recording, cfg, tmp_path / "a")
    n = len(recording.requests)
    run_dataset(records10[:3], Topology("hierarchical3"), recording, cfg, tmp_path / "b")
    assert len(recording.requests) == n
    assert (tmp_path / "a" / "transcripts.jsonl").read_bytes() == (tmp_path / "b" / "transcripts.jsonl").read_bytes()
    timings = [json.loads(l) for l in (tmp_path / "b" / "timings.jsonl").read_text().splitlines()]
    assert timings and all(t["cached"] for t in timings)


def test_resume_and_errors(schema, records10, tmp_path):
    script = valid_script()
    ok = ScriptedBackend(script)
    failing = ScriptedBackend({k: v for k, v in script.items() if k not in (("data_analyst", "*"), ("*", "*"))})
    cfg, records = PipelineConfig(schema), records10[:4]

    s1 = run_dataset(records[:1], Topology("hierarchical3"), ok, cfg, tmp_path)
    s2 = run_dataset(records[1:2], Topology("hierarchical3"), failing, cfg, tmp_path, resume=True)
    assert s1.completed == 1 and s2.failed == ["fx-0002"]
    err = json.loads((tmp_path / "errors.jsonl").read_text().splitlines()[0])
    assert "data_analyst" in err["error"] and err["partial"]["record_id"] == "fx-0002"

    s3 = run_dataset(records, Topology("hierarchical3"), ok, cfg, tmp_path, resume=True)
    assert (s3.completed, s3.skipped, s3.failed) == (3, 1, [])
    ids = [t["record_id"] for t in load_transcripts(tmp_path / "transcripts.jsonl")]
    assert ids == [r.id for r in records]
