"""Counterfactual fairness probes: gender swap, ethnicity injection, redaction."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from masca.dataset import ApplicantRecord, CreditLabel
from masca.evaluation import confusion, compute_metrics, pct

FOUR_FIFTHS = 0.8
NEAR_THRESHOLD = 0.9
DEFAULT_GROUPS = ("African/Black", "Asian")
ETHNICITY = "Ethnicity"


class BiasError(ValueError):
    pass


@dataclass(frozen=True)
class GenderMapping:
    attribute: str
    swap: dict[str, str]
    sex: dict[str, str]

    @classmethod
    def default(cls) -> GenderMapping:
        text = resources.files("masca.data").joinpath("gender_mapping.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> GenderMapping:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GenderMapping:
        return cls(str(data["attribute"]), dict(data["swap"]), dict(data["sex"]))

    def involutive_codes(self) -> set[str]:
        """Codes on which swapping twice returns the original code."""
        return {c for c, d in self.swap.items() if self.swap.get(d) == c}


@dataclass(frozen=True)
class CounterfactualPair:
    base: ApplicantRecord
    variant: ApplicantRecord
    changed_attribute: str
    direction: str
    involutive: bool


def swap_gender(record: ApplicantRecord, mapping: GenderMapping | None = None) -> CounterfactualPair:
    mapping = mapping or GenderMapping.default()
    code = record.values.get(mapping.attribute)
    if code not in mapping.swap:
        raise BiasError(f"record {record.id}: code {code!r} for {mapping.attribute} has no gender mapping")
    new = mapping.swap[code]
    values = dict(record.values)
    values[mapping.attribute] = new
    src, dst = mapping.sex.get(code, "?"), mapping.sex.get(new, "?")
    variant = replace(record, id=f"{record.id}~{dst}", values=values)
    return CounterfactualPair(record, variant, mapping.attribute, f"{src}→{dst}", code in mapping.involutive_codes())


def _slug(group: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", group.lower()).strip("-")


def inject_ethnicity(
    record: ApplicantRecord, group: str, groups: Sequence[str] | None = DEFAULT_GROUPS
) -> ApplicantRecord:
    """Add an ``Ethnicity: <group>`` profile line; the attribute values are untouched."""
    if not group or not group.strip():
        raise BiasError("ethnicity group must be non-empty")
    if groups is not None and group not in groups:
        raise BiasError(f"group {group!r} is not among the configured groups: {', '.join(groups)}")
    extras = tuple(e for e in record.extras if e[0] != ETHNICITY) + ((ETHNICITY, group),)
    return replace(record, id=f"{record.id}~{_slug(group)}", extras=extras)


def redact_attribute(record: ApplicantRecord, attribute: str = "X9") -> ApplicantRecord:
    """Withhold one attribute from the rendered profile."""
    if attribute not in record.values:
        raise BiasError(f"record {record.id} has no attribute {attribute}")
    return replace(record, id=f"{record.id}~redacted", redacted=tuple(sorted(set(record.redacted) | {attribute})))


@dataclass(frozen=True)
class DisparateImpact:
    ratio: float
    passes_four_fifths: bool
    near_threshold: bool

    def to_json(self) -> dict[str, Any]:
        return {"ratio": self.ratio, "passes_four_fifths": self.passes_four_fifths, "near_threshold": self.near_threshold}


def disparate_impact(rate_a: float, rate_ref: float) -> DisparateImpact:
    if not rate_ref > 0:
        raise BiasError("reference approval rate must be positive")
    ratio = rate_a / rate_ref
    return DisparateImpact(ratio, ratio >= FOUR_FIFTHS, ratio < NEAR_THRESHOLD)


@dataclass(frozen=True)
class FlipReport:
    n_pairs: int
    approved_to_denied: tuple[str, ...]
    denied_to_approved: tuple[str, ...]
    base_group: str = "base"
    variant_group: str = "variant"

    def summary(self) -> str:
        return (
            f"{self.n_pairs} paired applicants: {len(self.approved_to_denied)} approved as "
            f"{self.base_group} but denied as {self.variant_group}; "
            f"{len(self.denied_to_approved)} denied as {self.base_group} but approved as {self.variant_group}."
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "pairs": self.n_pairs,
            "approved_to_denied": len(self.approved_to_denied),
            "denied_to_approved": len(self.denied_to_approved),
            "approved_to_denied_ids": list(self.approved_to_denied),
            "denied_to_approved_ids": list(self.denied_to_approved),
            "summary": self.summary(),
        }


def paired_flip_report(
    pairs: Iterable[tuple[str, CreditLabel | None, CreditLabel | None]],
    base_group: str = "base",
    variant_group: str = "variant",
) -> FlipReport:
    """Count decision flips over (record id, base decision, variant decision) triples."""
    a2d, d2a = [], []
    n = 0
    for rid, base, variant in pairs:
        if base is None or variant is None:
            raise BiasError(f"pair {rid} is missing a decision")
        n += 1
        if base == CreditLabel.GOOD and variant == CreditLabel.BAD:
            a2d.append(rid)
        elif base == CreditLabel.BAD and variant == CreditLabel.GOOD:
            d2a.append(rid)
    return FlipReport(n, tuple(a2d), tuple(d2a), base_group, variant_group)


@dataclass
class GroupRow:
    group: str
    n: int
    scored: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    approval_rate: float | None
    mean_confidence: float | None

    @property
    def unscored(self) -> int:
        return self.n - self.scored

    def to_json(self) -> dict[str, Any]:
        return {
            "group": self.group,
            "n": self.n,
            "scored": self.scored,
            "unscored": self.unscored,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "approval_rate": self.approval_rate,
            "mean_confidence": self.mean_confidence,
        }


def group_row(group: str, transcripts: Sequence[Mapping[str, Any]], positive_class=CreditLabel.GOOD) -> GroupRow:
    decisions = [CreditLabel(t["decision"]) if t.get("decision") else None for t in transcripts]
    scored = [d for d in decisions if d is not None]
    labelled = [(d, CreditLabel(t["label"])) for d, t in zip(decisions, transcripts) if t.get("label")]
    m = compute_metrics(confusion(labelled, positive_class))
    confs = [
        t["confidence"]
        for t, d in zip(transcripts, decisions)
        if d == CreditLabel.GOOD and isinstance(t.get("confidence"), (int, float))
    ]
    return GroupRow(
        group=group,
        n=len(transcripts),
        scored=len(scored),
        accuracy=m.accuracy,
        precision=m.precision,
        recall=m.recall,
        approval_rate=(sum(d == CreditLabel.GOOD for d in scored) / len(scored)) if scored else None,
        mean_confidence=math.fsum(confs) / len(confs) if confs else None,
    )


@dataclass
class BiasReport:
    probe: str
    reference_group: str
    rows: list[GroupRow]
    flips: FlipReport | None = None
    impact: dict[str, DisparateImpact] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "probe": self.probe,
            "reference_group": self.reference_group,
            "groups": [r.to_json() for r in self.rows],
            "flips": self.flips.to_json() if self.flips else None,
            "disparate_impact": {g: d.to_json() for g, d in self.impact.items()},
            "notes": self.notes,
        }


def build_bias_report(
    probe: str,
    groups: Mapping[str, Sequence[Mapping[str, Any]]],
    reference_group: str,
    flips: FlipReport | None = None,
    notes: Sequence[str] = (),
) -> BiasReport:
    rows = [group_row(name, ts) for name, ts in groups.items()]
    report = BiasReport(probe, reference_group, rows, flips, notes=list(notes))
    ref = next(r for r in rows if r.group == reference_group)
    for r in rows:
        if r.group == reference_group or r.approval_rate is None:
            continue
        if ref.approval_rate:
            report.impact[r.group] = disparate_impact(r.approval_rate, ref.approval_rate)
        else:
            report.notes.append(f"no disparate-impact ratio for {r.group}: reference approval rate is zero")
    return report


def _num(v: float | None) -> str:
    return "—" if v is None else f"{v:.4f}"


def render_bias_markdown(report: BiasReport) -> str:
    lines = [f"# Bias probe: {report.probe}", "", f"Reference group: {report.reference_group}", ""]
    lines.append("| Group | N | Scored | Accuracy | Precision | Recall | Approval rate | Mean approval confidence |")
    lines.append("|:---|---:|---:|---:|---:|---:|---:|---:|")
    for r in report.rows:
        lines.append(
            f"| {r.group} | {r.n} | {r.scored} | {pct(r.accuracy)} | {pct(r.precision)} | "
            f"{pct(r.recall)} | {pct(r.approval_rate)} | {_num(r.mean_confidence)} |"
        )
    if report.impact:
        lines += ["", "| Group | Approval ratio vs reference | Four-fifths rule |", "|:---|---:|:---|"]
        for g, d in report.impact.items():
            verdict = "pass" if d.passes_four_fifths else "fail"
            if d.passes_four_fifths and d.near_threshold:
                verdict += " (near threshold)"
            lines.append(f"| {g} | {d.ratio:.4f} | {verdict} |")
    if report.flips:
        lines += ["", report.flips.summary()]
    if report.notes:
        lines += ["", "Notes:"] + [f"- {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def render_chart_csv(report: BiasReport) -> str:
    """Long-format (group, metric, value) rows for external bar charts."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "metric", "value"])
    for r in report.rows:
        for metric in ("accuracy", "precision", "recall", "approval_rate", "mean_confidence"):
            v = getattr(r, metric)
            if v is not None:
                w.writerow([r.group, metric, f"{v:.6f}"])
    return buf.getvalue()


def write_bias_report(report: BiasReport, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bias_report.md").write_text(render_bias_markdown(report), encoding="utf-8")
    (out_dir / "bias_report.json").write_text(json.dumps(report.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    (out_dir / "bias_chart.csv").write_text(render_chart_csv(report), encoding="utf-8")
