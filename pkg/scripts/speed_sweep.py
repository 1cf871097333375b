"""Queries/sec of cosine scan, Hamming scan and Hamming ball tree across database sizes.

    python scripts/speed_sweep.py --sizes 5000 20000 50000 --dim 1024
"""

import argparse
import json

from lesion_retrieval.bench import format_speed_table, speed_benchmark


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[5_000, 20_000, 50_000])
    parser.add_argument("--dim", type=int, default=1024)
    parser.add_argument("--dists", nargs="+", default=["clustered", "uniform"])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--queries", type=int, default=200)
    parser.add_argument("--json", help="write all reports here")
    args = parser.parse_args()

    reports = []
    for dist in args.dists:
        for n in args.sizes:
            rep = speed_benchmark(n, args.dim, dist, repeats=args.repeats, n_queries=args.queries)
            print(format_speed_table(rep))
            print(f"build {rep.build_seconds:.2f}s, tree matches scan: {rep.tree_matches_scan}\n", flush=True)
            reports.append(rep.to_dict())
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(reports, fh, indent=1)


if __name__ == "__main__":
    main()
