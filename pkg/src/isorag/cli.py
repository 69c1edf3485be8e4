"""Command-line entry point: benign runs, certification, attacks, reporting.

Subcommands:
  run      benign inference over a dataset, one report row per record
  certify  certified tau per record for a given corruption budget
  attack   empirical attacks (PIA / poison / exhaustive oracle) with racc/asr
  report   merge row files into a dataset-level summary

Options can come from a flat key=value config file (--config); explicit flags
win. Exit codes: 0 success, 1 per-record failures recorded in rows,
2 configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .aggregation import run_inference
from .attacks import build_payload, inject, load_attack_specs, oracle_attack
from .backends import CachedBackend, HTTPBackend, MockBackend, ModelBackend, load_table
from .certification import CERTIFY_ROW_COLUMNS, certify, certify_report_row
from .core import DefenseConfig, RetrievalSet
from .errors import DatasetParseError, IsoRagError
from .evaluation import (
    DatasetRecord,
    ReportRow,
    aggregate_report,
    load_dataset,
    merge_rows,
    metric_substring,
    read_rows_jsonl,
    rows_to_csv,
    rows_to_jsonl,
)


class UsageError(IsoRagError, ValueError):
    """Bad flag combination or unusable input file."""


_FILE_CASTS = {
    "k": int,
    "omega": int,
    "alpha": float,
    "beta": int,
    "eta": float,
    "gamma": float,
    "t_max": int,
    "k_prime": int,
    "seed": int,
    "workers": int,
    "omit_timings": lambda v: v.lower() in ("1", "true", "yes"),
    "oracle": lambda v: v.lower() in ("1", "true", "yes"),
    "cross_check": lambda v: v.lower() in ("1", "true", "yes"),
}


def _read_config_file(path: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        cast = _FILE_CASTS.get(key, str)
        values[key] = cast(value.strip())
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="isorag")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: Dict[str, argparse.ArgumentParser] = {}

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file; flags override")
        p.add_argument("--dataset", help="JSON-lines dataset path")
        p.add_argument("--backend", choices=["mock", "http"], default="mock")
        p.add_argument("--mock-table", help="mock rule table (JSON)")
        p.add_argument("--base-url", help="OpenAI-compatible endpoint base URL")
        p.add_argument("--model", default="default-model", help="HTTP model name")
        p.add_argument("--token-env", default="OPENAI_API_KEY")
        p.add_argument("--cache-dir", help="response cache directory")
        p.add_argument(
            "--aggregator",
            choices=["keyword", "decoding", "voting", "vanilla"],
            default="keyword",
        )
        p.add_argument("--k", type=int, help="top-k passages (default: all in record)")
        p.add_argument("--omega", type=int, default=1)
        p.add_argument("--alpha", type=float, default=0.2)
        p.add_argument("--beta", type=int, default=3)
        p.add_argument("--eta", type=float, default=0.0)
        p.add_argument("--gamma", type=float, default=0.99)
        p.add_argument("--t-max", type=int, default=20)
        p.add_argument("--k-prime", type=int, default=1)
        p.add_argument(
            "--threat-model",
            choices=["injection", "modification"],
            default="injection",
        )
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", help="output stem; writes <out>.jsonl and <out>.csv")
        p.add_argument(
            "--omit-timings",
            action="store_true",
            help="leave wall_time_ms empty for byte-reproducible outputs",
        )

    run_p = sub.add_parser("run", help="benign inference over a dataset")
    add_common(run_p)

    cert_p = sub.add_parser("certify", help="certified tau per record")
    add_common(cert_p)

    attack_p = sub.add_parser("attack", help="empirical attacks")
    add_common(attack_p)
    attack_p.add_argument("--attacks", help="JSON-lines attack specs per query_id")
    attack_p.add_argument(
        "--oracle",
        action="store_true",
        help="exhaust payload placements instead of the fixed positions",
    )
    attack_p.add_argument(
        "--cross-check",
        action="store_true",
        help="also certify each record and record tau next to the oracle minimum",
    )

    report_p = sub.add_parser("report", help="merge row files into a summary")
    report_p.add_argument("paths", nargs="+", help="row files (JSON-lines)")
    report_p.add_argument("--out", help="write the summary JSON here")

    subparsers.update(run=run_p, certify=cert_p, attack=attack_p, report=report_p)
    return parser, subparsers


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if config_path:
        file_values = _read_config_file(config_path)
        sub_parser = subparsers[args.command]
        known = {action.dest for action in sub_parser._actions}
        unknown = set(file_values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        # config file supplies defaults; explicit flags still win on reparse
        sub_parser.set_defaults(**file_values)
        args = parser.parse_args(argv)
    return args


def build_backend(args: argparse.Namespace) -> ModelBackend:
    if args.backend == "mock":
        if not args.mock_table:
            raise UsageError("mock backend requires --mock-table")
        backend: ModelBackend = MockBackend(load_table(args.mock_table))
    else:
        if not args.base_url:
            raise UsageError("http backend requires --base-url")
        backend = HTTPBackend(
            base_url=args.base_url, model=args.model, token_env=args.token_env
        )
    if args.cache_dir:
        backend = CachedBackend(backend, args.cache_dir)
    return backend


def record_retrieval(record: DatasetRecord, k: Optional[int]) -> RetrievalSet:
    passages = record.passages
    if k is not None:
        if len(passages) < k:
            raise UsageError(
                f"record {record.query.id} has {len(passages)} passages, need k={k}"
            )
        passages = passages[:k]
    return RetrievalSet(passages=passages, k=len(passages))


def record_defense_config(args: argparse.Namespace, retrieval: RetrievalSet) -> DefenseConfig:
    return DefenseConfig(
        k=retrieval.k,
        omega=args.omega,
        alpha=args.alpha,
        beta=args.beta,
        eta=args.eta,
        gamma=args.gamma,
        t_max=args.t_max,
        aggregator=args.aggregator,
        seed=args.seed,
    )


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if not getattr(args, name, None):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _write_outputs(stem: str, jsonl_text: str, csv_text: str) -> None:
    out = Path(stem)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".jsonl").write_text(jsonl_text, encoding="utf-8")
    out.with_suffix(".csv").write_text(csv_text, encoding="utf-8")


def _run_parallel(worker, records: Sequence[DatasetRecord], workers: int) -> List:
    if workers <= 1:
        return [worker(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, records))


def _elapsed_ms(start: float, omit: bool) -> Optional[int]:
    return None if omit else int((time.monotonic() - start) * 1000)


def cmd_run(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out")
    records = load_dataset(args.dataset)
    backend = build_backend(args)

    def worker(record: DatasetRecord) -> ReportRow:
        start = time.monotonic()
        try:
            retrieval = record_retrieval(record, args.k)
            config = record_defense_config(args, retrieval)
            response = run_inference(
                record.query, retrieval, config, backend, record.choices
            )
            score = metric_substring(response, record.answers).value
            return ReportRow(
                query_id=record.query.id,
                bacc=score,
                status="ok",
                wall_time_ms=_elapsed_ms(start, args.omit_timings),
            )
        except (IsoRagError, ValueError) as exc:
            return ReportRow(query_id=record.query.id, status=f"error: {exc}")

    rows = _run_parallel(worker, records, args.workers)
    _write_outputs(args.out, rows_to_jsonl(rows), rows_to_csv(rows))
    return 1 if any(r.status and r.status.startswith("error") for r in rows) else 0


def _certify_rows_to_csv(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CERTIFY_ROW_COLUMNS)
    for row in rows:
        writer.writerow(
            ["" if row.get(c) is None else row.get(c) for c in CERTIFY_ROW_COLUMNS]
        )
    return buf.getvalue()


def cmd_certify(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out")
    if args.aggregator == "vanilla":
        raise UsageError("the vanilla baseline has no certification path")
    records = load_dataset(args.dataset)
    backend = build_backend(args)

    def worker(record: DatasetRecord) -> Dict[str, object]:
        start = time.monotonic()
        retrieval = record_retrieval(record, args.k)
        config = record_defense_config(args, retrieval)
        try:
            result = certify(
                record.query,
                retrieval,
                args.threat_model,
                args.k_prime,
                args.omega,
                record.answers,
                config,
                backend,
                choices=record.choices,
            )
        except (IsoRagError, ValueError) as exc:
            return {
                "query_id": record.query.id,
                "aggregator": config.aggregator,
                "attack_kind": args.threat_model,
                "k_prime": args.k_prime,
                "omega": args.omega,
                "tau": None,
                "status": f"error: {exc}",
                "r_size": None,
                "approximate": None,
                "wall_time_ms": _elapsed_ms(start, args.omit_timings),
            }
        return certify_report_row(
            record.query.id,
            config,
            args.threat_model,
            args.k_prime,
            args.omega,
            result,
            wall_time_ms=_elapsed_ms(start, args.omit_timings),
        )

    rows = _run_parallel(worker, records, args.workers)
    jsonl_text = "".join(json.dumps(r) + "\n" for r in rows)
    _write_outputs(args.out, jsonl_text, _certify_rows_to_csv(rows))
    failed = any(str(r.get("status", "")).startswith("error") for r in rows)
    return 1 if failed else 0


def cmd_attack(args: argparse.Namespace) -> int:
    _require(args, "dataset", "out", "attacks")
    records = load_dataset(args.dataset)
    backend = build_backend(args)
    specs = load_attack_specs(args.attacks)

    def worker(record: DatasetRecord) -> ReportRow:
        start = time.monotonic()
        spec = specs.get(record.query.id)
        if spec is None:
            return ReportRow(query_id=record.query.id, status="skipped: no attack spec")
        try:
            retrieval = record_retrieval(record, args.k)
            config = record_defense_config(args, retrieval)
            payload = build_payload(record.query, spec)
            target = spec.get("target_text")
            cacc = None
            if args.oracle:
                if not isinstance(backend, MockBackend):
                    raise UsageError("--oracle requires the mock backend")
                result = oracle_attack(
                    record.query,
                    retrieval,
                    [payload],
                    int(spec.get("k_prime", args.k_prime)),
                    config,
                    record.answers,
                    backend,
                    choices=record.choices,
                    target_text=target,
                )
                score = result.min_score.value
                hit = bool(result.argmin and result.argmin.target_hit)
            else:
                positions = [int(p) for p in spec.get("positions") or [1]]
                corrupted = inject(retrieval, [payload] * len(positions), positions)
                response = run_inference(
                    record.query, corrupted, config, backend, record.choices
                )
                score = metric_substring(response, record.answers).value
                hit = bool(target) and target.lower() in response.text.lower()
            status = "ok"
            if args.cross_check:
                result_cert = certify(
                    record.query,
                    retrieval,
                    args.threat_model,
                    int(spec.get("k_prime", args.k_prime)),
                    args.omega,
                    record.answers,
                    config,
                    backend,
                    choices=record.choices,
                )
                cacc = result_cert.tau.value
                if result_cert.status == "exact" and score < cacc:
                    status = "soundness-violation"
            return ReportRow(
                query_id=record.query.id,
                racc=score,
                cacc=cacc,
                asr=1.0 if hit else 0.0,
                status=status,
                wall_time_ms=_elapsed_ms(start, args.omit_timings),
            )
        except (IsoRagError, ValueError) as exc:
            return ReportRow(query_id=record.query.id, status=f"error: {exc}")

    rows = _run_parallel(worker, records, args.workers)
    _write_outputs(args.out, rows_to_jsonl(rows), rows_to_csv(rows))
    return 1 if any(r.status and r.status.startswith("error") for r in rows) else 0


def _load_any_rows(path: str) -> List[ReportRow]:
    """Accept both evaluation rows and certification rows (tau -> cacc)."""
    rows: List[ReportRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        docs = [json.loads(line) for line in fh if line.strip()]
    if docs and "tau" in docs[0]:
        for doc in docs:
            rows.append(
                ReportRow(
                    query_id=doc["query_id"],
                    cacc=doc.get("tau"),
                    status=doc.get("status"),
                    wall_time_ms=doc.get("wall_time_ms"),
                )
            )
        return rows
    return read_rows_jsonl(path)


def cmd_report(args: argparse.Namespace) -> int:
    row_groups = [_load_any_rows(p) for p in args.paths]
    merged = merge_rows(row_groups)
    summary = aggregate_report(merged)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "certify":
            return cmd_certify(args)
        if args.command == "attack":
            return cmd_attack(args)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
