"""Deterministic financial ratios for the Feature Engineer.

The coded dataset stores buckets, not magnitudes, so bucketed categoricals are
mapped to documented midpoints (see ``data/buckets.json``). Anything the data
cannot support is reported as unavailable with a reason; nothing is imputed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from masca.dataset import ApplicantRecord, AttributeSchema, DatasetError


@dataclass(frozen=True)
class Quantity:
    """A number with provenance, or an explicit gap."""

    value: float | None
    reason: str | None = None
    source: str | None = None
    bucket: str | None = None

    @property
    def available(self) -> bool:
        return self.value is not None

    @classmethod
    def of(cls, value: float, source: str | None = None, bucket: str | None = None) -> Quantity:
        return cls(value=float(value), source=source, bucket=bucket)

    @classmethod
    def missing(cls, reason: str, source: str | None = None) -> Quantity:
        return cls(value=None, reason=reason, source=source)

    def to_json(self) -> dict[str, Any]:
        if self.available:
            out: dict[str, Any] = {"value": self.value}
        else:
            out = {"unavailable": self.reason}
        if self.source:
            out["source"] = self.source
        if self.bucket:
            out["bucket"] = self.bucket
        return out


@dataclass(frozen=True)
class NumericizedAttributes:
    disposable_income_proxy: Quantity
    installment_rate_pct: Quantity
    credit_amount: Quantity
    duration_months: Quantity
    savings_value: Quantity
    employment_years: Quantity
    age_years: Quantity
    dependents_count: Quantity
    existing_credits_count: Quantity
    checking_value: Quantity
    # Formula inputs with no attribute in the coded data; supplied only by
    # estimator hooks or an overriding bucket table.
    property_value: Quantity
    income_stability_metric: Quantity
    existing_credit_payments: Quantity
    credit_limit: Quantity

    def to_json(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name).to_json() for f in fields(self)}


@dataclass(frozen=True)
class FinancialRatios:
    dti_pct: Quantity
    dar: Quantity
    dscr: Quantity
    credit_utilization_pct: Quantity
    savings_to_income_pct: Quantity
    employment_stability_index: Quantity
    dependents_burden_ratio: Quantity

    def to_json(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name).to_json() for f in fields(self)}


PASS_THROUGH = {
    "installment_rate_pct": "X8",
    "credit_amount": "X5",
    "duration_months": "X2",
    "age_years": "X13",
    "dependents_count": "X18",
    "existing_credits_count": "X16",
}

UNSOURCED = {
    "disposable_income_proxy": "no disposable income attribute",
    "income_stability_metric": "no income stability metric",
    "existing_credit_payments": "no existing credit payment amounts",
    "credit_limit": "no credit limit attribute",
}

Estimator = Callable[[ApplicantRecord], "float | None"]


def load_bucket_table(path: str | Path | None = None) -> dict[str, Any]:
    if path is None:
        text = resources.files("masca.data").joinpath("buckets.json").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = json.loads(text)
    for name, spec in table.items():
        if name not in {f.name for f in fields(NumericizedAttributes)}:
            raise DatasetError(f"bucket table: unknown field {name!r}")
        for code, v in spec["buckets"].items():
            if v is not None and (not math.isfinite(v) or v < 0):
                raise DatasetError(f"bucket table: {name}/{code} must be a non-negative number")
    return table


def numericize(
    record: ApplicantRecord,
    schema: AttributeSchema,
    bucket_table: Mapping[str, Any] | None = None,
    estimators: Mapping[str, Estimator] | None = None,
) -> NumericizedAttributes:
    """Turn a coded record into formula inputs. Never raises for missing data."""
    table = load_bucket_table() if bucket_table is None else bucket_table
    estimators = estimators or {}
    out: dict[str, Quantity] = {}

    for name, attr_id in PASS_THROUGH.items():
        raw = record.values.get(attr_id)
        if raw is None or attr_id in record.redacted:
            out[name] = Quantity.missing(f"{attr_id} not provided", source=attr_id)
        elif schema[attr_id].categorical:
            out[name] = Quantity.missing(f"{attr_id} is categorical", source=attr_id)
        else:
            out[name] = Quantity.of(raw, source=attr_id)

    for name, spec in table.items():
        attr_id = spec["attribute"]
        code = record.values.get(attr_id)
        if code is None or attr_id in record.redacted:
            out[name] = Quantity.missing(f"{attr_id} not provided", source=attr_id)
        elif code not in spec["buckets"]:
            out[name] = Quantity.missing(f"code {code} not in bucket table", source=attr_id)
        elif spec["buckets"][code] is None:
            out[name] = Quantity.missing("no monetary bucket", source=attr_id)
        else:
            out[name] = Quantity.of(spec["buckets"][code], source=attr_id, bucket=code)

    for f in fields(NumericizedAttributes):
        if f.name in out and f.name not in estimators:
            continue
        if f.name in estimators:
            v = estimators[f.name](record)
            if v is not None and math.isfinite(v) and v >= 0:
                out[f.name] = Quantity.of(v, source="estimator")
            else:
                out[f.name] = Quantity.missing("estimator returned no usable value", source="estimator")
        else:
            out[f.name] = Quantity.missing(UNSOURCED.get(f.name, "not in bucket table"))
    return NumericizedAttributes(**out)


def _percent_ratio(num: Quantity, num_name: str, den: Quantity, den_name: str, scale: float = 1.0) -> Quantity:
    gaps = [n for n, q in ((num_name, num), (den_name, den)) if not q.available]
    if gaps:
        return Quantity.missing(", ".join(gaps))
    if den.value == 0:
        return Quantity.missing(f"zero denominator: {den_name}")
    result = num.value / den.value * scale
    if not math.isfinite(result):
        return Quantity.missing("non-finite result")
    return Quantity.of(result)


def _sum(a: Quantity, b: Quantity, name: str) -> Quantity:
    if a.available and b.available:
        return Quantity.of(a.value + b.value)
    return Quantity.missing(name)


def compute_ratios(n: NumericizedAttributes) -> FinancialRatios:
    # installment rate is already debt payments / disposable income x 100
    if n.installment_rate_pct.available:
        dti = Quantity.of(n.installment_rate_pct.value, source=n.installment_rate_pct.source)
    else:
        dti = Quantity.missing("installment_rate_pct")
    assets = _sum(n.savings_value, n.property_value, "assets")
    obligations = _sum(n.installment_rate_pct, n.existing_credit_payments, "debt obligations")
    return FinancialRatios(
        dti_pct=dti,
        dar=_percent_ratio(n.credit_amount, "credit_amount", assets, "assets"),
        dscr=_percent_ratio(n.income_stability_metric, "income_stability_metric", obligations, "debt obligations"),
        credit_utilization_pct=_percent_ratio(n.credit_amount, "credit_amount", n.credit_limit, "credit_limit", 100.0),
        savings_to_income_pct=_percent_ratio(
            n.savings_value, "savings_value", n.disposable_income_proxy, "disposable_income_proxy", 100.0
        ),
        employment_stability_index=_percent_ratio(n.employment_years, "employment_years", n.age_years, "age_years"),
        dependents_burden_ratio=_percent_ratio(
            n.dependents_count, "dependents_count", n.income_stability_metric, "income_stability_metric"
        ),
    )


REPORT_LABELS = (
    ("dti_pct", "Debt-to-Income Ratio", " %"),
    ("dar", "Debt-to-Asset Ratio", ""),
    ("dscr", "Debt Service Coverage Ratio", ""),
    ("credit_utilization_pct", "Credit Utilization Ratio", " %"),
    ("savings_to_income_pct", "Savings-to-Income Ratio", " %"),
    ("employment_stability_index", "Employment Stability Index", ""),
    ("dependents_burden_ratio", "Dependents Burden Ratio", ""),
)


def ratios_report(r: FinancialRatios) -> str:
    lines = []
    for name, label, unit in REPORT_LABELS:
        q: Quantity = getattr(r, name)
        if q.available:
            lines.append(f"{label}: {q.value:.4f}{unit}")
        else:
            lines.append(f"{label}: not computable: {q.reason}")
    return "\n".join(lines)


def provenance_report(n: NumericizedAttributes) -> str:
    """Inputs behind the ratios, including the bucket midpoint used."""
    lines = []
    for f in fields(n):
        q: Quantity = getattr(n, f.name)
        if q.available:
            where = f" (from {q.source}" + (f", bucket {q.bucket} midpoint" if q.bucket else "") + ")" if q.source else ""
            lines.append(f"{f.name}: {q.value:g}{where}")
        else:
            lines.append(f"{f.name}: unavailable ({q.reason})")
    return "\n".join(lines)
