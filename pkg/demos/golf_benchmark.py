"""Golf pendulum: degraded prior, plain NN, SINDYc and PGNN-L on one seed.

    python3 demos/golf_benchmark.py [seed]
"""

import sys

from pgnnl.bench import golf_default_config, run_golf_benchmark


def main(seed=0):
    rep = run_golf_benchmark(golf_default_config(seed))
    print(rep.to_markdown())
    print(f"lambda_phy picked by validation rollout: {rep.lambda_phy} (scores {rep.lambda_scores})")
    for m, r in rep.residuals.items():
        print(f"{m:7s} mean |energy residual| true model {r['true']['mean_abs']:.3e}, "
              f"prior model {r['prior']['mean_abs']:.3e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
