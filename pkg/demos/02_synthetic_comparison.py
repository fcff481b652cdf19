"""Post-processing a trained regressor on two Gaussian groups, method by method.

A five-layer network is trained on a synthetic task where the target depends on
features whose distribution differs between groups. Its predictions inherit the
gap. The script then compares four ways of closing it on held-out data:

* no post-processing,
* rewriting the second-last layer and refitting the output head,
* quantile matching of the outputs,
* barycentric transport of the binned outputs.

The numbers printed are mean test MSE and two-sample KS over three splits.

Run:  python3 demos/02_synthetic_comparison.py
"""
import numpy as np

from esvdfair import experiment as ex

cfg = ex.RunConfig.from_dict({
    "dataset": {"synthetic": {"n": 4000, "dim": 8, "seed": 0}},
    "fairness": {"ce_tilde": 15.0, "cv_tilde": 150.0},
    "seeds": [0, 1, 2],
})
ds = ex.load_dataset(cfg)
runs = [ex.run_seed(cfg, seed, ds) for seed in cfg.seeds]

print(f"{'method':<12}{'MSE':>8}{'KS':>8}")
for method in runs[0]:
    mse = np.mean([r[method]["mse"] for r in runs])
    ks = np.mean([r[method]["ks"] for r in runs])
    print(f"{method:<12}{mse:8.3f}{ks:8.3f}")

# Which head adjustment follows the rewrite matters a great deal. A full
# least-squares refit rediscovers the group signal the rewrite removed; a
# fine-tune that starts from the rewritten head keeps part of the gain.
prep = ex.prepare(cfg, 0, ds)
model, _ = ex.train_model(cfg, prep)
print()
for mode in ("least-squares", "fine-tune"):
    c = cfg.override(**{"fairness.mode": mode})
    adjusted, report = ex.postprocess(c, prep, model)
    before, after = report["diagnostics_before"], report["diagnostics_after"]
    r = ex.evaluate_model(c, prep, adjusted, mode)
    print(f"{mode:<14} layer mean gap {before['d_e_squared']:.3g} -> {after['d_e_squared']:.3g}, "
          f"test KS {r.ks:.3f}, MSE {r.mse:.3f}")
