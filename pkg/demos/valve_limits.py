"""Valve with velocity/acceleration limits: PGNN-L on a prior without
limits (A) and with estimated limits (B).

    python3 demos/valve_limits.py [seed]
"""

import sys

from pgnnl.bench import build_true_plant, run_valve_benchmark, valve_default_config


def main(seed=0):
    cfg = valve_default_config(seed)
    v_max = build_true_plant(cfg).params.limits.v_max
    reports = run_valve_benchmark(cfg)
    for variant, rep in reports.items():
        print(rep.to_markdown())
        for m, e in rep.extra.items():
            print(f"  {m:7s} max |x2| {e['max_abs_x2']:.4f} (v_max {v_max:.4f})")
        print()
    a, b = reports["A"].rmse["pgnn-l"], reports["B"].rmse["pgnn-l"]
    print(f"PGNN-L RMSE without limits {a:.3e}, with limits {b:.3e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
