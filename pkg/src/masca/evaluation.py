"""Confusion matrices, classification metrics and Table-style run reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from masca.dataset import CreditLabel

log = logging.getLogger(__name__)

UNDEFINED = "—"


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    positive_class: CreditLabel = CreditLabel.GOOD
    unscored: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> dict[str, Any]:
        return {
            "positive_class": self.positive_class.value,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "unscored": self.unscored,
        }


def confusion(
    decisions: Iterable[tuple[CreditLabel | None, CreditLabel]],
    positive_class: CreditLabel = CreditLabel.GOOD,
    strict: bool = False,
) -> ConfusionMatrix:
    """Count (predicted, actual) pairs; ``None`` predictions are unscored.

    With ``strict`` an unscored decision is counted as wrong instead.
    """
    tp = fp = fn = tn = unscored = 0
    for predicted, actual in decisions:
        actual = CreditLabel(actual)
        if predicted is None:
            unscored += 1
            if not strict:
                continue
            predicted = CreditLabel.BAD if actual == positive_class else positive_class
        predicted = CreditLabel(predicted)
        if predicted == positive_class:
            if actual == positive_class:
                tp += 1
            else:
                fp += 1
        elif actual == positive_class:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn, positive_class, unscored)


@dataclass(frozen=True)
class Metrics:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def _div(a: int, b: int) -> float | None:
    return a / b if b else None


def compute_metrics(m: ConfusionMatrix) -> Metrics:
    precision = _div(m.tp, m.tp + m.fp)
    recall = _div(m.tp, m.tp + m.fn)
    f1 = None
    if precision is not None and recall is not None:
        # equals 2PR/(P+R) whenever P+R > 0, and 0 when tp == 0
        f1 = 2 * m.tp / (2 * m.tp + m.fp + m.fn)
    return Metrics(_div(m.tp + m.tn, m.n), precision, recall, f1)


@dataclass
class ReportRow:
    name: str
    matrix: ConfusionMatrix
    metrics: Metrics

    @property
    def scored(self) -> int:
        return self.matrix.n

    @property
    def unscored(self) -> int:
        return self.matrix.unscored


@dataclass
class EvaluationReport:
    run_id: str
    rows: list[ReportRow]
    dataset_sha256: str | None = None
    prompt_checksums: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def pct(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v * 100:.2f}%"


def delta_pp(v: float | None, ref: float | None) -> str:
    if v is None or ref is None:
        return UNDEFINED
    return f"{(v - ref) * 100:+.2f} pp"


METRIC_COLUMNS = (("accuracy", "Accuracy"), ("precision", "Precision"), ("recall", "Recall"), ("f1", "F1 Score"))


def metrics_table(rows: Sequence[ReportRow], baseline: ReportRow | None = None) -> str:
    header = ["Evaluation"] + [label for _, label in METRIC_COLUMNS]
    if baseline is not None:
        header += [f"Δ {label}" for _, label in METRIC_COLUMNS]
    header += ["Scored", "Unscored"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join([":---"] + ["---:"] * (len(header) - 1)) + "|",
    ]
    for r in rows:
        m = r.metrics.as_dict()
        cells = [r.name] + [pct(m[k]) for k, _ in METRIC_COLUMNS]
        if baseline is not None:
            ref = baseline.metrics.as_dict()
            cells += [delta_pp(m[k], ref[k]) for k, _ in METRIC_COLUMNS]
        cells += [str(r.scored), str(r.unscored)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_markdown(report: EvaluationReport, baseline: str | None = None, title: str | None = None) -> str:
    base = report.row(baseline) if baseline else None
    out = [f"# {title or 'Evaluation: ' + report.run_id}", ""]
    positive = report.rows[0].matrix.positive_class.value if report.rows else CreditLabel.GOOD.value
    out.append(f"Positive class: {positive}")
    out.append("")
    out.append(metrics_table(report.rows, base))
    out.append("")
    if report.dataset_sha256:
        out.append(f"Dataset sha256: {report.dataset_sha256}")
    for name, digest in sorted(report.prompt_checksums.items()):
        out.append(f"Prompt {name}: {digest[:16]}")
    if report.notes:
        out.append("")
        out.append("Notes:")
        out += [f"- {n}" for n in report.notes]
    return "\n".join(out) + "\n"


def _frac(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def render_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "accuracy", "precision", "recall", "f1", "unscored"])
    for r in report.rows:
        m = r.metrics
        w.writerow([r.name, _frac(m.accuracy), _frac(m.precision), _frac(m.recall), _frac(m.f1), r.unscored])
    return buf.getvalue()


def confusion_json(report: EvaluationReport) -> str:
    return json.dumps({r.name: r.matrix.to_json() for r in report.rows}, indent=1) + "\n"


def rows_from_transcripts(
    transcripts: Iterable[dict[str, Any]],
    positive_class: CreditLabel = CreditLabel.GOOD,
    strict: bool = False,
) -> tuple[list[ReportRow], list[str]]:
    groups: dict[str, list[tuple[CreditLabel | None, CreditLabel]]] = {}
    notes = []
    for t in transcripts:
        if t.get("label") is None:
            notes.append(f"{t.get('record_id')}: no ground-truth label, skipped")
            continue
        name = t.get("config") or t.get("topology")
        pred = CreditLabel(t["decision"]) if t.get("decision") else None
        groups.setdefault(name, []).append((pred, CreditLabel(t["label"])))
    rows = []
    for name, pairs in groups.items():
        m = confusion(pairs, positive_class, strict)
        rows.append(ReportRow(name, m, compute_metrics(m)))
    return rows, notes


def read_transcripts(path: Path) -> tuple[list[dict[str, Any]], list[str]]:
    out, notes = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if "record_id" not in obj or "decision" not in obj:
                raise KeyError("record_id/decision")
        except (json.JSONDecodeError, KeyError) as exc:
            notes.append(f"{path.name} line {lineno}: corrupt transcript skipped ({exc})")
            continue
        out.append(obj)
    return out, notes


def evaluate_run(
    run_dir: str | Path,
    positive_class: CreditLabel = CreditLabel.GOOD,
    strict: bool = False,
) -> EvaluationReport:
    run_dir = Path(run_dir)
    tpath = run_dir / "transcripts.jsonl"
    if not run_dir.is_dir():
        raise EvaluationError(f"run directory not found: {run_dir}")
    if not tpath.exists():
        raise EvaluationError(f"no transcripts.jsonl in {run_dir}")
    meta = {}
    if (run_dir / "meta.json").exists():
        meta = json.loads((run_dir / "meta.json").read_text(encoding="utf-8"))
    transcripts, notes = read_transcripts(tpath)
    rows, more = rows_from_transcripts(transcripts, positive_class, strict)
    notes += more
    for r in rows:
        if r.unscored:
            how = "counted as errors" if strict else "excluded from N"
            notes.append(f"{r.name}: {r.unscored} unparseable decision(s) {how}")
    return EvaluationReport(
        run_id=meta.get("run_id", run_dir.name),
        rows=rows,
        dataset_sha256=meta.get("dataset_sha256"),
        prompt_checksums=meta.get("prompt_checksums", {}),
        notes=notes,
    )


def write_report(report: EvaluationReport, out_dir: str | Path, baseline: str | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(render_markdown(report, baseline), encoding="utf-8")
    (out_dir / "report.csv").write_text(render_csv(report), encoding="utf-8")
    (out_dir / "confusion.json").write_text(confusion_json(report), encoding="utf-8")


def merge_reports(reports: Sequence[EvaluationReport], run_id: str = "merged") -> EvaluationReport:
    """Concatenate rows; duplicate row names are prefixed with their run id."""
    rows, notes = [], []
    names = [r.name for rep in reports for r in rep.rows]
    for rep in reports:
        for r in rep.rows:
            name = f"{rep.run_id}/{r.name}" if names.count(r.name) > 1 else r.name
            rows.append(ReportRow(name, r.matrix, r.metrics))
        notes += [f"{rep.run_id}: {n}" for n in rep.notes]
    hashes = {rep.dataset_sha256 for rep in reports if rep.dataset_sha256}
    if len(hashes) > 1:
        notes.append("runs were made on different datasets")
    return EvaluationReport(
        run_id=run_id,
        rows=rows,
        dataset_sha256=hashes.pop() if len(hashes) == 1 else None,
        prompt_checksums=reports[0].prompt_checksums if reports else {},
        notes=notes,
    )
