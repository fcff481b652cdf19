"""How a weight matrix carries a group gap, and how shrinking its spectrum removes it.

Two Gaussian groups pass through one random linear layer. The mean gap after
the layer equals the spectral energy of W S_e minus a small ridge term, and the
covariance gap is bounded by the fourth-power spectral energy of W S_v. Shrinking
those singular values under a budget shrinks the gaps with them.

Run:  python3 demos/01_moment_geometry.py
"""
import numpy as np

from esvdfair.esvd import shrink_layer_first_moment, shrink_layer_second_moment
from esvdfair.numerics import thin_svd
from esvdfair.transforms import (build_first_moment_transform, build_M,
                                 build_second_moment_transform, d_e_squared, d_v_squared)

rng = np.random.default_rng(0)
n, m = 6, 4
X1 = rng.normal(size=(2000, n)) @ np.diag([2.0, 1.5, 1, 1, 1, 1]) + 0.8
X2 = rng.normal(size=(1500, n))
W = rng.normal(size=(m, n))
m1, m2 = X1.mean(0), X2.mean(0)

# the mean gap is an exact spectral quantity
eps = 1e-5
s_e = thin_svd(W @ build_first_moment_transform(m1, m2, eps).S).s
print(f"mean gap d_e^2            {d_e_squared(m1, m2, W):10.4f}")
print(f"sum sigma^2 - eps tr(WW') {np.sum(s_e ** 2) - eps * np.trace(W @ W.T):10.4f}")

# the covariance gap is bounded by a spectral quantity
s_v = thin_svd(W @ build_second_moment_transform(build_M(X1, X2)).S).s
print(f"covariance gap d_v^2      {d_v_squared(X1, X2, W):10.4f}")
print(f"bound sum sigma^4         {np.sum(s_v ** 4):10.4f}")

# shrink both spectra: covariance first, then the mean
X = np.vstack([X1, X2])
for ratio in (2.0, 15.0, 150.0):
    Wv = shrink_layer_second_moment(W, X, X1, X2, cv_tilde=ratio).W
    We = shrink_layer_first_moment(Wv, X, m1, m2, eps=eps, ce_tilde=ratio).W
    print(f"budget 1/{ratio:<5g}  d_e^2 {d_e_squared(m1, m2, We):8.4f}   "
          f"d_v^2 {d_v_squared(X1, X2, We):8.4f}   ||dW|| {np.linalg.norm(We - W):.3f}")
