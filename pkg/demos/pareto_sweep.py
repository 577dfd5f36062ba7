"""Sweep lambda_phy on a shortened golf dataset and print the validation
(L_error, L_phy) front.

    python3 demos/pareto_sweep.py [seed]
"""

import sys
from dataclasses import replace

from pgnnl.bench import _pgnn_config, build_prior, golf_default_config, make_datasets
from pgnnl.cli import DEFAULT_SWEEP
from pgnnl.hyperopt import pareto_sweep


def main(seed=0):
    cfg = replace(golf_default_config(seed), n_steps=1500)
    ds, _ = make_datasets(cfg)
    fixed = _pgnn_config(build_prior(cfg, "default"), cfg.dt, dict(cfg.pgnn, epochs=100, patience=None))
    print("lambda_phy  L_error     L_phy       front")
    for p in pareto_sweep(DEFAULT_SWEEP, fixed, ds, seed):
        print(f"{p.lambda_phy:10.2f}  {p.L_error:.4e}  {p.L_phy:.4e}  {'*' if p.nondominated else ''}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
