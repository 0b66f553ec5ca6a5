"""Run the desk-scale synthetic benchmark and print the measured quantities.

    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --out benchmark.json
"""
import argparse
import json
import logging

import numpy as np
import torch

from iflf.benchmark import BenchmarkConfig, run_seed, run_substitution_seed


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--out", default="benchmark.json")
    parser.add_argument("--skip-substitution", action="store_true")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(args.threads)

    cfg = BenchmarkConfig()
    results = {"main": [], "substitution": []}
    for seed in args.seeds:
        r = run_seed(cfg, seed)
        results["main"].append(r)
        print(json.dumps({k: r[k] for k in ("seed", "accuracy", "silhouette", "head_variance", "min_val_accuracy")}),
              flush=True)
        if not args.skip_substitution:
            s = run_substitution_seed(cfg, seed)
            results["substitution"].append(s)
            print(json.dumps(s), flush=True)
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=1, default=str)

    main_runs = results["main"]
    gap = np.mean([r["accuracy"]["tmtl"] - r["accuracy"]["stl"] for r in main_runs])
    print(f"1-shot TMTL - STL: {100 * gap:.1f} points")
    print(f"silhouette TMTL > PTM: {sum(r['silhouette']['tmtl'] > r['silhouette']['ptm'] for r in main_runs)}"
          f"/{len(main_runs)}")
    print(f"head variance TMTL < BMTL: "
          f"{sum(r['head_variance']['tmtl'] < r['head_variance']['bmtl'] for r in main_runs)}/{len(main_runs)}")
    print(f"min TMTL source validation accuracy: {min(r['min_val_accuracy']['tmtl'] for r in main_runs):.3f}")
    if results["substitution"]:
        change = np.mean([s["recall_change"] for s in results["substitution"]])
        print(f"shared-class recall change under substitution: {100 * change:+.1f} points")


if __name__ == "__main__":
    main()
