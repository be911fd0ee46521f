#!/usr/bin/env python3
"""Trading fit for sparsity with an l1 penalty inside the EKF.

The l1 term enters as a shift of the estimate against sign(theta) along the
columns of the covariance, leaving the covariance itself alone. Sweeping its
weight shows how many parameters end up below 1e-3 in magnitude and what that
costs in open-loop test fit.

Run: python3 demos/l1_sweep.py  (a few minutes)
"""

import numpy as np

from ekfrnn.data import bfr, gen_nonlinear_benchmark, split_train_test, standardize
from ekfrnn.ekf import EkfConfig, train, zero_fraction
from ekfrnn.init_state import open_loop_predict
from ekfrnn.models import RnnSpec
from ekfrnn.objectives import L1Reg, L2Reg

train_ds, test_ds = split_train_test(gen_nonlinear_benchmark(0, N_total=1000))
train_ds, scaling = standardize(train_ds)
test_ds, _ = standardize(test_ds, scaling)
spec = RnnSpec(n_u=1, n_y=1, n_x=4, hidden_x=(6,), hidden_y=(6,), act_x="atan", act_y="atan")

print(f"{'lambda':>8} {'zeros':>7} {'test BFR':>9}")
for lam in (1e-6, 1e-4, 1e-3, 3e-3, 1e-2):
    config = EkfConfig(regs=(L2Reg(1e-3, 1e-3), L1Reg(lam)), epochs=5)
    result = train(train_ds, spec, config, rng=np.random.default_rng(0))
    _, Yhat = open_loop_predict(spec, result.theta, test_ds, rho_x=1e-3)
    print(f"{lam:8.0e} {100 * zero_fraction(result.theta):6.1f}% {bfr(test_ds.Y, Yhat[0]):9.2f}")
