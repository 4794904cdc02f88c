from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from masca.bias import (
    DEFAULT_GROUPS,
    BiasError,
    GenderMapping,
    build_bias_report,
    disparate_impact,
    group_row,
    inject_ethnicity,
    paired_flip_report,
    redact_attribute,
    render_bias_markdown,
    render_chart_csv,
    swap_gender,
)
from masca.dataset import ApplicantRecord, CreditLabel, profile_text, render_structured
from masca.orchestrator import PipelineConfig, Topology, load_transcripts, run_dataset

from conftest import random_record

G, B = CreditLabel.GOOD, CreditLabel.BAD


# -- disparate impact -----------------------------------------------------------------


def test_published_ratio():
    d = disparate_impact(0.525, 0.60)
    assert abs(d.ratio - 0.875) <= 1e-12
    assert d.passes_four_fifths and d.near_threshold


def test_failing_and_identity_ratios():
    d = disparate_impact(0.40, 0.60)
    assert round(d.ratio, 3) == 0.667 and not d.passes_four_fifths
    same = disparate_impact(0.6, 0.6)
    assert same.ratio == 1.0 and same.passes_four_fifths and not same.near_threshold
    assert disparate_impact(0.48, 0.6).passes_four_fifths  # exactly 0.8 passes
    with pytest.raises(BiasError):
        disparate_impact(0.5, 0.0)


# -- flips ---------------------------------------------------------------------------


def test_published_flip_counts(fixtures_dir):
    rows = [json.loads(l) for l in (fixtures_dir / "gender_flips115.jsonl").read_text().splitlines()]
    triples = [(r["record_id"], CreditLabel(r["male"]), CreditLabel(r["female"])) for r in rows]
    report = paired_flip_report(triples, "male", "female")
    assert report.n_pairs == 115
    assert len(report.approved_to_denied) == 7

    male = group_row("male", [{"decision": r["male"], "label": r["label"]} for r in rows])
    female = group_row("female", [{"decision": r["female"], "label": r["label"]} for r in rows])
    assert f"{male.accuracy * 100:.2f}" == "65.22"
    assert f"{female.accuracy * 100:.2f}" == "58.26"


def test_identical_decisions_no_flips():
    r = paired_flip_report([(str(i), G if i % 2 else B, G if i % 2 else B) for i in range(20)])
    assert r.approved_to_denied == () and r.denied_to_approved == ()


def test_engineered_flips_match_brute_force():
    rng = random.Random(3)
    base = [rng.choice([G, B]) for _ in range(10)]
    variant = list(base)
    for i in rng.sample(range(10), 3):
        variant[i] = B if base[i] == G else G
    triples = [(f"p{i}", b, v) for i, (b, v) in enumerate(zip(base, variant))]
    report = paired_flip_report(triples)
    brute = [(b, v) for _, b, v in triples if b != v]
    assert len(report.approved_to_denied) + len(report.denied_to_approved) == 3 == len(brute)
    assert len(report.approved_to_denied) == sum(1 for b, v in brute if b == G)


def test_flip_requires_decisions():
    with pytest.raises(BiasError, match="p1"):
        paired_flip_report([("p1", G, None)])


# -- gender swap ---------------------------------------------------------------------


def _with(records10, **values):
    return ApplicantRecord("r", dict(records10[0].values, **values), G)


def test_swap_male_single(records10):
    pair = swap_gender(_with(records10, X9="A93"))
    assert pair.variant.values["X9"] == "A95"
    assert pair.direction == "male→female" and pair.involutive
    assert pair.variant.id == "r~female"


def test_involution_on_bijective_subset(records10):
    m = GenderMapping.default()
    codes = m.involutive_codes()
    assert "A93" in codes
    for code in codes:
        once = swap_gender(_with(records10, X9=code), m).variant
        twice = swap_gender(once, m).variant
        assert twice.values == _with(records10, X9=code).values


def test_swap_changes_only_x9(records10):
    for code in GenderMapping.default().swap:
        rec = _with(records10, X9=code)
        var = swap_gender(rec).variant
        diff = {k for k in rec.values if rec.values[k] != var.values[k]}
        assert diff == {"X9"}


def test_swap_unknown_code(records10):
    m = GenderMapping("X9", {"A93": "A95"}, {"A93": "male", "A95": "female"})
    with pytest.raises(BiasError, match="A91"):
        swap_gender(_with(records10, X9="A91"), m)


# -- ethnicity -----------------------------------------------------------------------


def test_injection_adds_one_line(schema, records10):
    rec = inject_ethnicity(records10[0], "Asian")
    entries = render_structured(rec, schema)
    assert len(entries) == 21
    assert entries[-1]["description"] == "Ethnicity: Asian"


def test_groups_differ_only_in_that_line(schema, records10):
    a = profile_text(render_structured(inject_ethnicity(records10[0], "Asian"), schema)).splitlines()
    b = profile_text(render_structured(inject_ethnicity(records10[0], "African/Black"), schema)).splitlines()
    assert a[:-1] == b[:-1] and a[-1] != b[-1]


def test_injection_leaves_attributes_bit_identical_200(schema):
    rng = random.Random(200)
    for i in range(200):
        rec = random_record(rng, schema, f"z{i}")
        for g in DEFAULT_GROUPS:
            out = inject_ethnicity(rec, g)
            assert out.values == rec.values
            assert all(type(out.values[k]) is type(rec.values[k]) for k in rec.values)
            assert render_structured(out, schema)[:20] == render_structured(rec, schema)


def test_injection_replaces_previous_group(records10):
    twice = inject_ethnicity(inject_ethnicity(records10[0], "Asian"), "African/Black")
    assert twice.extras == (("Ethnicity", "African/Black"),)


@given(st.sampled_from(["", "  ", "Martian"]))
def test_injection_rejects_bad_groups(group):
    rec = ApplicantRecord("r", {}, None)
    with pytest.raises(BiasError):
        inject_ethnicity(rec, group)


def test_redaction(schema, records10):
    rec = redact_attribute(records10[0], "X9")
    entries = render_structured(rec, schema)
    assert len(entries) == 19 and "X9" not in [e["attribute"] for e in entries]
    assert rec.values == records10[0].values
    with pytest.raises(BiasError):
        redact_attribute(records10[0], "X42")


# -- full experiment -----------------------------------------------------------------


def test_ethnicity_experiment_rows(schema, recording, tmp_path):
    rng = random.Random(21)
    records = [random_record(rng, schema, f"e{i:03d}") for i in range(200)]
    groups = {"baseline": records} | {g: [inject_ethnicity(r, g) for r in records] for g in DEFAULT_GROUPS}
    transcripts = {}
    for name, recs in groups.items():
        d = tmp_path / name.replace("/", "-")
        run_dataset(recs, Topology("zero_shot"), recording, PipelineConfig(schema, config_name=name), d, workers=8)
        transcripts[name] = load_transcripts(d / "transcripts.jsonl")
    report = build_bias_report("ethnicity injection", transcripts, "baseline")
    assert [r.group for r in report.rows] == ["baseline", *DEFAULT_GROUPS]
    assert all(r.n == 200 for r in report.rows)
    assert set(report.impact) == set(DEFAULT_GROUPS)
    md = render_bias_markdown(report)
    assert "| Asian | 200 |" in md and "Four-fifths rule" in md
    assert render_chart_csv(report).splitlines()[0] == "group,metric,value"


def test_group_row_confidence_over_approvals():
    ts = [
        {"decision": "good", "label": "good", "confidence": 0.8},
        {"decision": "good", "label": "bad", "confidence": 0.6},
        {"decision": "bad", "label": "bad", "confidence": 0.1},
        {"decision": None, "label": "bad", "confidence": None},
    ]
    row = group_row("g", ts)
    assert row.mean_confidence == pytest.approx(0.7)
    assert (row.n, row.scored, row.unscored) == (4, 3, 1)
    assert row.approval_rate == pytest.approx(2 / 3)
