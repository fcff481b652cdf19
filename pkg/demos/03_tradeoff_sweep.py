"""The fairness/accuracy dial: sweeping the mean-gap budget.

One network is trained per split and reused for every cell, so the only thing
that changes along the sweep is how hard the first-moment stage shrinks. Larger
ratios mean smaller budgets, lower KS and higher MSE. The same sweep is
available from the command line as ``esvdfair sweep``.

Run:  python3 demos/03_tradeoff_sweep.py
"""
from esvdfair import experiment as ex

cfg = ex.RunConfig.from_dict({
    "dataset": {"synthetic": {"n": 4000, "dim": 8, "seed": 0}},
    "seeds": [0, 1, 2],
})
models = {seed: ex.train_model(cfg, ex.prepare(cfg, seed))[0] for seed in cfg.seeds}
_, table = ex.run_sweep(cfg, ce_grid=[1.5, 2, 5, 15, 50], cv_grid=[150], models=models)

print(f"{'ce ratio':>9}{'KS':>14}{'MSE':>14}")
for cell in sorted(table, key=lambda c: c["ce_tilde"]):
    print(f"{cell['ce_tilde']:>9g}{cell['ks_mean']:>8.3f} ±{cell['ks_std']:.3f}"
          f"{cell['mse_mean']:>8.3f} ±{cell['mse_std']:.3f}")
