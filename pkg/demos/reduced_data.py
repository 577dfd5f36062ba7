"""Train SINDYc and PGNN-L on the first 15 % of every golf trajectory and
compare the RMSE growth against full-data training.

    python3 demos/reduced_data.py [seed]
"""

import sys

from pgnnl.bench import degradation_factors, golf_default_config, run_reduced_data_study


def main(seed=0):
    full, short = run_reduced_data_study(golf_default_config(seed), fraction=0.15)
    factors = degradation_factors(full, short)
    for m in full.rmse:
        note = f"  ({short.failures[m]})" if m in short.failures else ""
        print(f"{m:7s} full {full.rmse[m]:.3e}  transient {short.rmse[m]:.3e}  factor {factors[m]:.3g}{note}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
