"""Run the tap x prompt x framing grid on a synthetic fixture and print a P@1 table.

    python scripts/run_ablation_grid.py --config configs/toy_ablation.yaml --out grid.json
"""

import argparse
import json
import time

from tapret.config import load_config
from tapret.experiments import GridRunner, Workload
from tapret.fixtures import synthetic_task


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/toy_ablation.yaml")
    ap.add_argument("--queries", type=int, default=12)
    ap.add_argument("--distractors", type=int, default=12)
    ap.add_argument("--out")
    args = ap.parse_args()

    cfg = load_config(args.config)
    queries, corpus = synthetic_task(args.queries, args.distractors, seed=cfg.seed)
    t0 = time.perf_counter()
    results = GridRunner(cfg, cfg.make_backend(), Workload(queries, corpus)).run()
    print(f"{len(results)} cells in {time.perf_counter() - t0:.1f}s")
    print(f"{'tap':10} {'prompt':6} {'framing':12} {'M':>3}  P@1")
    for r in results:
        c = r.config
        print(f"{c['tap']:10} {c['prompt']:6} {c['framing']:12} {c['M']:>3}  {r.precision_at_1:.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([r.to_json() for r in results], fh, sort_keys=True, indent=2)


if __name__ == "__main__":
    main()
