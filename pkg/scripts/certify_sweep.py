#!/usr/bin/env python3
"""Sweep the corruption budget and group size, printing mean certified tau.

Reproduces the robustness-vs-budget trend at desk scale: tau is non-increasing
in k' and trades off against benign accuracy through omega.

Usage:
    python scripts/make_demo_data.py --out demo
    python scripts/certify_sweep.py --data-dir demo --max-k-prime 3 --omegas 1 2
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from isorag.aggregation import run_inference  # noqa: E402
from isorag.backends import MockBackend, load_table  # noqa: E402
from isorag.certification import certify  # noqa: E402
from isorag.core import DefenseConfig  # noqa: E402
from isorag.evaluation import load_dataset, metric_substring  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="demo")
    parser.add_argument("--max-k-prime", type=int, default=3)
    parser.add_argument("--omegas", type=int, nargs="+", default=[1, 2])
    parser.add_argument("--alpha", type=float, default=0.6)
    parser.add_argument("--beta", type=int, default=3)
    parser.add_argument("--threat-model", default="injection",
                        choices=["injection", "modification"])
    args = parser.parse_args()

    data_dir = Path(args.data_dir)
    records = load_dataset(data_dir / "dataset.jsonl")
    model = MockBackend(load_table(data_dir / "table.json"))

    print(f"threat model: {args.threat_model}, aggregator: keyword")
    print(f"{'omega':>5} {'k_prime':>8} {'mean_bacc':>10} {'mean_tau':>9} statuses")
    for omega in args.omegas:
        for k_prime in range(args.max_k_prime + 1):
            baccs, taus, statuses = [], [], set()
            for record in records:
                retrieval = record.retrieval()
                config = DefenseConfig(
                    k=retrieval.k, omega=omega, alpha=args.alpha, beta=args.beta,
                    aggregator="keyword",
                )
                response = run_inference(record.query, retrieval, config, model)
                baccs.append(metric_substring(response, record.answers).value)
                result = certify(
                    record.query, retrieval, args.threat_model, k_prime, omega,
                    record.answers, config, model,
                )
                taus.append(result.tau.value)
                statuses.add(result.status)
            print(
                f"{omega:>5} {k_prime:>8} {sum(baccs)/len(baccs):>10.2f} "
                f"{sum(taus)/len(taus):>9.2f} {','.join(sorted(statuses))}"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
