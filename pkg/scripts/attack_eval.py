#!/usr/bin/env python3
"""Contrast undefended and defended pipelines under concrete attacks.

Runs the configured attacks against the vanilla baseline (all passages in one
prompt) and the keyword-aggregated defense, reporting robust accuracy and
targeted attack success rate for each.

Usage:
    python scripts/make_demo_data.py --out demo
    python scripts/attack_eval.py --data-dir demo
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from isorag.aggregation import run_inference  # noqa: E402
from isorag.attacks import build_payload, inject, load_attack_specs  # noqa: E402
from isorag.backends import MockBackend, load_table  # noqa: E402
from isorag.core import DefenseConfig  # noqa: E402
from isorag.evaluation import load_dataset, metric_substring  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="demo")
    parser.add_argument("--alpha", type=float, default=0.6)
    parser.add_argument("--beta", type=int, default=3)
    args = parser.parse_args()

    data_dir = Path(args.data_dir)
    records = load_dataset(data_dir / "dataset.jsonl")
    specs = load_attack_specs(data_dir / "attacks.jsonl")
    model = MockBackend(load_table(data_dir / "table.json"))

    print(f"{'aggregator':>10} {'racc':>6} {'asr':>6}")
    for aggregator in ("vanilla", "keyword"):
        raccs, hits = [], []
        for record in records:
            spec = specs.get(record.query.id)
            if spec is None:
                continue
            retrieval = record.retrieval()
            config = DefenseConfig(
                k=retrieval.k, omega=1, alpha=args.alpha, beta=args.beta,
                aggregator=aggregator,
            )
            payload = build_payload(record.query, spec)
            positions = [int(p) for p in spec.get("positions") or [1]]
            corrupted = inject(retrieval, [payload] * len(positions), positions)
            response = run_inference(record.query, corrupted, config, model)
            raccs.append(metric_substring(response, record.answers).value)
            target = spec.get("target_text", "")
            hits.append(1.0 if target and target.lower() in response.text.lower() else 0.0)
        print(
            f"{aggregator:>10} {sum(raccs)/len(raccs):>6.2f} {sum(hits)/len(hits):>6.2f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
