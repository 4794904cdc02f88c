"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from masca import __version__
from masca.agents import prompt_checksums
from masca.backend import LiveBackend, ResponseCache, ScriptedBackend
from masca.bias import (
    DEFAULT_GROUPS,
    BiasError,
    GenderMapping,
    build_bias_report,
    inject_ethnicity,
    paired_flip_report,
    redact_attribute,
    swap_gender,
    write_bias_report,
)
from masca.config import ConfigError, RunConfig
from masca.dataset import (
    CreditLabel,
    DatasetError,
    dump_jsonl,
    file_sha256,
    load_dataset,
    load_schema,
)
from masca.evaluation import (
    EvaluationError,
    evaluate_run,
    merge_reports,
    metrics_table,
    render_csv,
    render_markdown,
    rows_from_transcripts,
    write_report,
)
from masca.features import load_bucket_table
from masca.orchestrator import (
    PipelineConfig,
    Scenario,
    ScenarioError,
    Topology,
    load_transcripts,
    perturb_scenario,
    run_dataset,
)

log = logging.getLogger("masca")

ABLATION_NAMES = {
    "flat": "Single-level with multiple agents",
    "two_level": "Two-level with multiple agents",
    "hierarchical3": "Hierarchical (three levels + orchestrator)",
    "zero_shot": "Zero Shot",
    "cot": "Chain of Thought",
    "single_agent_multitask": "Single Agent performing multitasks",
}

ENGINE_POLICY = {
    "temperature": "engine default, not stated by the source method",
    "max_tokens": "engine default, not stated by the source method",
    "retries": "3 attempts with exponential backoff on transient HTTP statuses; one corrective JSON retry per agent",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--dataset", help="dataset file (overrides config)")
    p.add_argument("--format", choices=("jsonl", "statlog"))
    p.add_argument("--schema", help="attribute schema JSON (default: bundled German-credit codebook)")
    p.add_argument("--topology")
    p.add_argument("--model", help="model id for every agent")
    p.add_argument("--orchestrator-model", help="model id for the decision orchestrator")
    p.add_argument("--backend", choices=("scripted", "live"))
    p.add_argument("--script", help="scripted backend response file")
    p.add_argument("--endpoint", help="chat-completions URL for the live backend")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument("--tau", type=float, help="risk-reward approval threshold")
    p.add_argument("--p-star", type=float, help="posterior default-probability threshold")
    p.add_argument("--prior", type=float, help="prior default probability")
    p.add_argument("--workers", type=int, help="records processed in parallel")
    p.add_argument("--scenario", help="scenario JSON applied to every record")
    p.add_argument("--no-cache", action="store_true", help="disable the response cache")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--run-id", help="run directory name (default: timestamp + topology)")
    p.add_argument("--seed")
    p.add_argument("--resume", action="store_true", help="skip records already in transcripts.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masca", description="Hierarchical multi-agent credit assessment engine")
    parser.add_argument("--version", action="version", version=f"masca {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run one topology over a dataset")
    _run_flags(p)

    p = sub.add_parser("eval", help="score a run directory")
    p.add_argument("run_dir")
    p.add_argument("--positive", choices=("good", "bad"), default="good")
    p.add_argument("--strict", action="store_true", help="count unparseable decisions as errors")
    p.add_argument("--out", help="where to write report files (default: the run directory)")

    p = sub.add_parser("ablate", help="sweep topologies and emit a comparison table")
    _run_flags(p)
    p.add_argument("--topologies", default="flat,two_level,hierarchical3")
    p.add_argument("--baseline", help="topology whose row anchors the delta columns")

    p = sub.add_parser("bias", help="counterfactual bias probes")
    p.add_argument("probe", choices=("gender", "ethnicity", "redact"))
    _run_flags(p)
    p.add_argument("--groups", help="comma-separated ethnicity groups")
    p.add_argument("--mapping", help="gender mapping JSON")
    p.add_argument("--attribute", default="X9", help="attribute withheld by the redact probe")

    p = sub.add_parser("report", help="merge run reports into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--baseline", help="row name anchoring delta columns")
    p.add_argument("--positive", choices=("good", "bad"), default="good")
    p.add_argument("--title", default="Performance comparison")
    p.add_argument("--out", help="directory for report.md / report.csv")

    p = sub.add_parser("ingest", help="convert a statlog file to validated JSONL")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=("jsonl", "statlog"), default="statlog")
    p.add_argument("--schema")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    o: dict[tuple[str, ...], Any] = {
        ("dataset", "path"): args.dataset,
        ("dataset", "format"): args.format,
        ("schema",): args.schema,
        ("topology",): args.topology,
        ("backend", "kind"): args.backend,
        ("backend", "script"): args.script,
        ("backend", "endpoint"): args.endpoint,
        ("backend", "api_key_env"): args.api_key_env,
        ("thresholds", "tau"): args.tau,
        ("thresholds", "p_star"): args.p_star,
        ("thresholds", "prior"): args.prior,
        ("concurrency", "workers"): args.workers,
        ("scenario",): args.scenario,
        ("output_dir",): args.out,
        ("seed",): args.seed,
        ("cache",): False if args.no_cache else None,
    }
    cfg = RunConfig.load(args.config, o)
    if args.model:
        cfg.data["model_map"] = {"*": args.model}
    if args.orchestrator_model:
        cfg.data["model_map"]["decision_orchestrator"] = args.orchestrator_model
    return cfg


class Session:
    """Everything a run needs, built once from a validated config."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        d = cfg.data
        self.schema = load_schema(d["schema"])
        self.dataset_path = Path(d["dataset"]["path"])
        self.records = load_dataset(self.dataset_path, self.schema, d["dataset"]["format"])
        self.bucket_table = load_bucket_table(d["bucket_table"]) if d["bucket_table"] else None
        if d["scenario"]:
            scenario = Scenario.from_file(d["scenario"])
            self.records = [perturb_scenario(r, scenario, self.schema) for r in self.records]
        be = d["backend"]
        if be["kind"] == "scripted":
            self.backend = ScriptedBackend.from_file(be["script"])
        else:
            self.backend = LiveBackend(
                be["endpoint"],
                api_key_env=be.get("api_key_env", "MASCA_API_KEY"),
                timeout=float(be.get("timeout", 120)),
                max_in_flight=int(be.get("max_in_flight", 4)),
            )

    def pipeline_config(self, run_dir: Path, name: str | None = None) -> PipelineConfig:
        d = self.cfg.data
        th = d["thresholds"]
        return PipelineConfig(
            schema=self.schema,
            prior=th["prior"],
            tau=th["tau"],
            p_star=th["p_star"],
            belief_weights=dict(th.get("belief_weights") or {}),
            rr_weights=dict(th.get("rr_weights") or {}),
            temperature=d["temperature"],
            max_tokens=d["max_tokens"],
            layer_workers=d["concurrency"]["layer_workers"],
            bucket_table=self.bucket_table,
            catalog_path=d["catalog"],
            cache=ResponseCache(run_dir / "cache") if d["cache"] else None,
            config_name=name,
        )

    def write_meta(self, run_dir: Path, run_id: str, **extra: Any) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        catalog_dir = Path(self.cfg["catalog"]).parent if self.cfg["catalog"] else None
        meta = {
            "run_id": run_id,
            "engine_version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "config": self.cfg.echo(),
            "config_file": str(self.cfg.source) if self.cfg.source else None,
            "overrides": self.cfg.overrides,
            "seed": str(self.cfg["seed"]),
            "dataset": str(self.dataset_path),
            "dataset_sha256": file_sha256(self.dataset_path),
            "records": len(self.records),
            "prompt_checksums": prompt_checksums(catalog_dir),
            "engine_policy": ENGINE_POLICY,
            **extra,
        }
        (run_dir / "meta.json").write_text(json.dumps(meta, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    def run(self, run_dir: Path, run_id: str, records=None, topology: str | None = None,
            name: str | None = None, resume: bool = False) -> int:
        kind = topology or self.cfg["topology"]
        records = self.records if records is None else records
        self.write_meta(run_dir, run_id, topology=kind, status="running")
        summary = run_dataset(
            records,
            Topology(kind, dict(self.cfg["model_map"])),
            self.backend,
            self.pipeline_config(run_dir, name),
            run_dir,
            workers=self.cfg["concurrency"]["workers"],
            resume=resume,
        )
        status = "failed" if summary.failed else "complete"
        self.write_meta(run_dir, run_id, topology=kind, status=status,
                        completed=summary.completed, skipped=summary.skipped, failed=summary.failed)
        log.info("%s: %d completed, %d skipped, %d failed", run_id, summary.completed, summary.skipped, len(summary.failed))
        if summary.failed:
            print(f"{len(summary.failed)} record(s) failed; see {run_dir / 'errors.jsonl'}", file=sys.stderr)
            return 2
        return 0


def _run_id(args: argparse.Namespace, label: str) -> str:
    return args.run_id or f"{time.strftime('%Y%m%d-%H%M%S')}-{label}"


def cmd_run(args: argparse.Namespace) -> int:
    session = Session(_config_from_args(args))
    run_id = _run_id(args, session.cfg["topology"])
    run_dir = Path(session.cfg["output_dir"]) / run_id
    code = session.run(run_dir, run_id, resume=args.resume)
    print(run_dir)
    return code


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_run(args.run_dir, CreditLabel(args.positive), strict=args.strict)
    write_report(report, args.out or args.run_dir)
    sys.stdout.write(render_markdown(report))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from masca.orchestrator import TOPOLOGIES

    kinds = [k.strip() for k in args.topologies.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in TOPOLOGIES]
    if unknown:
        raise UsageError(f"unknown topologies: {', '.join(unknown)}")
    if args.baseline and args.baseline not in kinds:
        raise UsageError(f"--baseline {args.baseline} is not among the swept topologies")
    session = Session(_config_from_args(args))
    run_id = _run_id(args, "ablation")
    sweep_dir = Path(session.cfg["output_dir"]) / run_id
    code = 0
    rows = []
    for kind in kinds:
        run_dir = sweep_dir / kind
        code = max(code, session.run(run_dir, f"{run_id}/{kind}", topology=kind, resume=args.resume))
        report = evaluate_run(run_dir)
        write_report(report, run_dir)
        for r in report.rows:
            r.name = ABLATION_NAMES.get(r.name, r.name)
        rows += report.rows
    baseline = next((r for r in rows if r.name == ABLATION_NAMES.get(args.baseline)), None) if args.baseline else None
    table = "# Ablation comparison\n\n" + metrics_table(rows, baseline) + "\n"
    (sweep_dir / "comparison.md").write_text(table, encoding="utf-8")
    merged = merge_reports([], run_id)
    merged.rows = rows
    (sweep_dir / "comparison.csv").write_text(render_csv(merged), encoding="utf-8")
    sys.stdout.write(table)
    return code


def _split_groups(text: str | None) -> list[str]:
    if not text:
        return list(DEFAULT_GROUPS)
    return [g.strip() for g in text.split(",") if g.strip()]


def cmd_bias(args: argparse.Namespace) -> int:
    session = Session(_config_from_args(args))
    run_id = _run_id(args, f"bias-{args.probe}")
    out = Path(session.cfg["output_dir"]) / run_id
    code = 0

    def run_group(name: str, records) -> list[dict[str, Any]]:
        nonlocal code
        d = out / name.replace("/", "-")
        code = max(code, session.run(d, f"{run_id}/{name}", records=records, name=name, resume=args.resume))
        return load_transcripts(d / "transcripts.jsonl") if (d / "transcripts.jsonl").exists() else []

    notes = []
    if args.probe == "gender":
        mapping = GenderMapping.from_file(args.mapping) if args.mapping else GenderMapping.default()
        base = [r for r in session.records if mapping.sex.get(r.values.get(mapping.attribute)) == "male"]
        pairs = [swap_gender(r, mapping) for r in base]
        if not all(p.involutive for p in pairs):
            notes.append("some swaps use non-bijective mapping entries; the swap is not reversible for those codes")
        groups = {"male": run_group("male", base), "female (swapped)": run_group("female", [p.variant for p in pairs])}
        male_by_id = {t["record_id"]: t for t in groups["male"]}
        female_by_id = {t["record_id"]: t for t in groups["female (swapped)"]}
        triples = []
        for p in pairs:
            t, v = male_by_id.get(p.base.id), female_by_id.get(p.variant.id)
            if t is None or v is None or t.get("decision") is None or v.get("decision") is None:
                notes.append(f"pair {p.base.id} skipped: missing decision")
                continue
            triples.append((p.base.id, CreditLabel(t["decision"]), CreditLabel(v["decision"])))
        flips = paired_flip_report(triples, "male", "female")
        report = build_bias_report("gender swap (male→female)", groups, "male", flips, notes)
    elif args.probe == "ethnicity":
        groups_list = _split_groups(args.groups)
        groups = {"baseline (no ethnicity)": run_group("baseline", session.records)}
        for g in groups_list:
            groups[g] = run_group(g, [inject_ethnicity(r, g, groups_list) for r in session.records])
        report = build_bias_report("ethnicity injection", groups, "baseline (no ethnicity)")
    else:
        mapping = GenderMapping.from_file(args.mapping) if args.mapping else GenderMapping.default()
        base = [r for r in session.records if mapping.sex.get(r.values.get(mapping.attribute)) == "male"]
        groups = {
            "male": run_group("male", base),
            f"{args.attribute} redacted": run_group("redacted", [redact_attribute(r, args.attribute) for r in base]),
        }
        notes.append(
            f"interpretation: 'gender removed' is realised by withholding {args.attribute} "
            "(personal status and sex) from the rendered profile"
        )
        report = build_bias_report(f"redact {args.attribute}", groups, "male", notes=notes)
    write_bias_report(report, out)
    sys.stdout.write((out / "bias_report.md").read_text(encoding="utf-8"))
    return code


def cmd_report(args: argparse.Namespace) -> int:
    reports = [evaluate_run(d, CreditLabel(args.positive)) for d in args.run_dirs]
    merged = merge_reports(reports)
    if args.baseline:
        merged.row(args.baseline)  # KeyError -> usage error below
    text = render_markdown(merged, args.baseline, title=args.title)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(text, encoding="utf-8")
        (out / "report.csv").write_text(render_csv(merged), encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    schema = load_schema(args.schema)
    records = load_dataset(args.input, schema, args.format)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    dump_jsonl(records, args.output)
    print(f"{len(records)} records -> {args.output} (sha256 {file_sha256(args.input)[:16]} of input)")
    return 0


COMMANDS = {
    "run": cmd_run,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bias": cmd_bias,
    "report": cmd_report,
    "ingest": cmd_ingest,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"unknown name: {exc}", file=sys.stderr)
        return 1
    except (EvaluationError, DatasetError, ScenarioError, BiasError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
