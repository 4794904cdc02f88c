"""German-credit style records: schema, loaders, profile rendering, label parsing."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

N_ATTRIBUTES = 20
N_CATEGORICAL = 13
N_NUMERICAL = 7


class DatasetError(ValueError):
    """Raised for unreadable files, malformed lines and schema violations."""


class LabelParseError(ValueError):
    """Decision text names neither or both credit labels."""


class CreditLabel(str, Enum):
    GOOD = "good"
    BAD = "bad"

    @classmethod
    def from_statlog(cls, token: str) -> CreditLabel:
        if token == "1":
            return cls.GOOD
        if token == "2":
            return cls.BAD
        raise DatasetError(f"statlog label must be 1 or 2, got {token!r}")


@dataclass(frozen=True)
class Attribute:
    id: str
    name: str
    kind: str  # "categorical" | "numerical"
    unit: str | None = None
    codebook: dict[str, str] = field(default_factory=dict)
    granularity: float = 1.0

    @property
    def categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]
    name: str = "german-credit"

    def __post_init__(self) -> None:
        problems = []
        ids = [a.id for a in self.attributes]
        if len(ids) != N_ATTRIBUTES:
            problems.append(f"expected {N_ATTRIBUTES} attributes, found {len(ids)}")
        if len(set(ids)) != len(ids):
            problems.append("attribute ids are not unique")
        n_cat = sum(a.categorical for a in self.attributes)
        if n_cat != N_CATEGORICAL or len(ids) - n_cat != N_NUMERICAL:
            problems.append(
                f"expected {N_CATEGORICAL} categorical / {N_NUMERICAL} numerical, "
                f"found {n_cat} / {len(ids) - n_cat}"
            )
        for a in self.attributes:
            if a.kind not in ("categorical", "numerical"):
                problems.append(f"{a.id}: unknown kind {a.kind!r}")
            elif a.categorical and not a.codebook:
                problems.append(f"{a.id}: categorical attribute has an empty codebook")
        if problems:
            raise DatasetError("invalid schema: " + "; ".join(problems))

    def __getitem__(self, attr_id: str) -> Attribute:
        for a in self.attributes:
            if a.id == attr_id:
                return a
        raise KeyError(attr_id)

    def __contains__(self, attr_id: object) -> bool:
        return any(a.id == attr_id for a in self.attributes)

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.attributes]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "attributes": [
                {
                    "id": a.id,
                    "name": a.name,
                    "kind": a.kind,
                    "unit": a.unit,
                    "codebook": dict(a.codebook),
                    **({"granularity": a.granularity} if a.granularity != 1.0 else {}),
                }
                for a in self.attributes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AttributeSchema:
        attrs = tuple(
            Attribute(
                id=str(a["id"]),
                name=str(a["name"]),
                kind=str(a["kind"]),
                unit=a.get("unit"),
                codebook={str(k): str(v) for k, v in (a.get("codebook") or {}).items()},
                granularity=float(a.get("granularity", 1.0)),
            )
            for a in data["attributes"]
        )
        return cls(attributes=attrs, name=data.get("name", "custom"))


def load_schema(path: str | Path | None = None) -> AttributeSchema:
    """Load a schema file, or the bundled German-credit codebook when ``path`` is None."""
    if path is None:
        text = resources.files("masca.data").joinpath("german_schema.json").read_text("utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read schema file {path}: {exc}") from exc
    try:
        return AttributeSchema.from_dict(json.loads(text))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed schema file {path}: {exc}") from exc


@dataclass(frozen=True)
class ApplicantRecord:
    """One application.

    ``extras`` are (name, value) lines shown to agents but outside the schema
    (e.g. an injected ethnicity). ``redacted`` lists attribute ids withheld
    from rendering.
    """

    id: str
    values: dict[str, Any]
    label: CreditLabel | None = None
    extras: tuple[tuple[str, str], ...] = ()
    redacted: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "values": dict(self.values),
            "label": self.label.value if self.label else None,
        }
        if self.extras:
            out["extras"] = [list(e) for e in self.extras]
        if self.redacted:
            out["redacted"] = list(self.redacted)
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> ApplicantRecord:
        label = obj.get("label")
        return cls(
            id=str(obj["id"]),
            values=dict(obj["values"]),
            label=CreditLabel(label) if label is not None else None,
            extras=tuple((str(k), str(v)) for k, v in obj.get("extras", ())),
            redacted=tuple(obj.get("redacted", ())),
        )


def validate_record(record: ApplicantRecord, schema: AttributeSchema) -> list[str]:
    """Return every schema violation in ``record`` (empty when valid)."""
    problems = []
    for key, value in record.values.items():
        if key not in schema:
            problems.append(f"unknown attribute {key}")
            continue
        attr = schema[key]
        if attr.categorical:
            if not isinstance(value, str) or value not in attr.codebook:
                problems.append(f"unknown code {value!r} for {key}")
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{key} must be a number, got {value!r}")
            elif not math.isfinite(value):
                problems.append(f"{key} is not finite")
            elif value < 0:
                problems.append(f"{key} must be non-negative, got {value}")
    for rid in record.redacted:
        if rid not in schema:
            problems.append(f"redacted id {rid} is not in the schema")
    return problems


def _number(token: str) -> int | float:
    try:
        return int(token)
    except ValueError:
        return float(token)


def _parse_statlog_line(
    line: str, lineno: int, schema: AttributeSchema, record_id: str
) -> ApplicantRecord:
    cols = line.split()
    if len(cols) not in (N_ATTRIBUTES, N_ATTRIBUTES + 1):
        raise DatasetError(
            f"line {lineno}: expected {N_ATTRIBUTES + 1} columns, found {len(cols)}"
        )
    values: dict[str, Any] = {}
    for attr, token in zip(schema.attributes, cols):
        if attr.categorical:
            if token not in attr.codebook:
                raise DatasetError(f"line {lineno}: unknown code {token!r} for {attr.id}")
            values[attr.id] = token
        else:
            try:
                values[attr.id] = _number(token)
            except ValueError:
                raise DatasetError(
                    f"line {lineno}: {attr.id} expects a number, got {token!r}"
                ) from None
    label = None
    if len(cols) == N_ATTRIBUTES + 1:
        try:
            label = CreditLabel.from_statlog(cols[-1])
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
    return ApplicantRecord(id=record_id, values=values, label=label)


def load_dataset(
    path: str | Path, schema: AttributeSchema, format: str = "jsonl"
) -> list[ApplicantRecord]:
    """Read ``path`` as ``jsonl`` or ``statlog`` and validate every record."""
    if format not in ("jsonl", "statlog"):
        raise DatasetError(f"unknown dataset format {format!r}")
    p = Path(path)
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {p}: {exc}") from exc

    records: list[ApplicantRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if format == "statlog":
            rec = _parse_statlog_line(line, lineno, schema, f"{p.stem}-{len(records) + 1:04d}")
        else:
            try:
                obj = json.loads(line)
                rec = ApplicantRecord.from_json(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: malformed record: {exc}") from exc
        problems = validate_record(rec, schema)
        if problems:
            raise DatasetError(f"line {lineno}: " + "; ".join(problems))
        if rec.id in seen:
            raise DatasetError(f"line {lineno}: duplicate record id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def dump_jsonl(records: Iterable[ApplicantRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def format_number(value: int | float) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def render_structured(record: ApplicantRecord, schema: AttributeSchema) -> list[dict[str, str]]:
    """Render ``record`` as one entry per schema attribute, in schema order.

    Categorical entries carry the code and its codebook description verbatim;
    numerical entries carry the value and its unit. Extras are appended after
    the schema attributes; redacted ids are skipped.
    """
    problems = validate_record(record, schema)
    missing = [a for a in schema.ids if a not in record.values and a not in record.redacted]
    if missing:
        problems.append("missing attribute(s) " + ", ".join(missing))
    if problems:
        raise DatasetError(f"record {record.id}: " + "; ".join(problems))

    entries = []
    for attr in schema.attributes:
        if attr.id in record.redacted:
            continue
        raw = record.values[attr.id]
        if attr.categorical:
            value, description = raw, attr.codebook[raw]
        else:
            value = format_number(raw)
            description = f"{value} {attr.unit}" if attr.unit else value
        entries.append(
            {"attribute": attr.id, "name": attr.name, "value": value, "description": description}
        )
    for name, value in record.extras:
        entries.append(
            {"attribute": name, "name": name, "value": value, "description": f"{name}: {value}"}
        )
    return entries


def profile_text(entries: list[dict[str, str]]) -> str:
    """One line per profile entry, as embedded in agent prompts."""
    lines = []
    for e in entries:
        if e["attribute"] == e["name"]:
            lines.append(e["description"])
        elif e["value"] == e["description"] or e["description"].startswith(e["value"] + " "):
            lines.append(f"{e['attribute']} {e['name']}: {e['description']}")
        else:
            lines.append(f"{e['attribute']} {e['name']}: {e['value']} ({e['description']})")
    return "\n".join(lines)


_SYNONYMS = {
    "good": CreditLabel.GOOD,
    "approve": CreditLabel.GOOD,
    "approved": CreditLabel.GOOD,
    "bad": CreditLabel.BAD,
    "deny": CreditLabel.BAD,
    "denied": CreditLabel.BAD,
    "reject": CreditLabel.BAD,
    "rejected": CreditLabel.BAD,
}
_TOKEN_RE = re.compile(r"\b(" + "|".join(_SYNONYMS) + r")\b", re.IGNORECASE)
_DECISION_LINE_RE = re.compile(
    r"^[\s*#>_-]*(?:final\s+)?decision\s*[:=]\s*[\s*_\"']*([A-Za-z]+)", re.IGNORECASE | re.MULTILINE
)


def parse_label(text: str) -> CreditLabel:
    """Map free-text decision output to a label, refusing to guess on conflicts."""
    explicit = {
        _SYNONYMS[m.group(1).lower()]
        for m in _DECISION_LINE_RE.finditer(text)
        if m.group(1).lower() in _SYNONYMS
    }
    if len(explicit) == 1:
        return explicit.pop()
    found = {_SYNONYMS[m.group(1).lower()] for m in _TOKEN_RE.finditer(text)}
    if len(found) != 1:
        what = "conflicting" if found else "no"
        raise LabelParseError(f"unparseable decision ({what} label tokens): {text[:80]!r}")
    return found.pop()
