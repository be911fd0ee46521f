#!/usr/bin/env python3
"""Learning a thresholded linear system with a cross-entropy loss.

A third-order linear system produces a binary label that is 1 whenever a
linear function of its state is positive. We fit an affine state-space model
with a sigmoid output by EKF training, feeding the filter the closed-form
innovation of the smoothed cross-entropy, and score open-loop test accuracy.

Run: python3 demos/binary_classification.py  (about a minute)
"""

import numpy as np

from ekfrnn.data import accuracy, gen_binary_linear, split_train_test, standardize
from ekfrnn.ekf import EkfConfig, train
from ekfrnn.init_state import open_loop_predict
from ekfrnn.models import RnnSpec, init_params
from ekfrnn.objectives import CrossEntropyLoss, L2Reg

loss = CrossEntropyLoss(eps=0.005)
spec = RnnSpec(n_u=1, n_y=1, n_x=3, out_act="sigmoid")
config = EkfConfig(loss=loss, regs=(L2Reg(1e-2, 1e-2),), epochs=25)

for sigma in (0.0, 0.2):
    # 1000 samples to train on, the next 1000 to test
    train_ds, test_ds = split_train_test(gen_binary_linear(sigma, N_total=2000, seed=0), 1000)
    train_ds, scaling = standardize(train_ds)
    test_ds, _ = standardize(test_ds, scaling)

    # small initial weights keep the sigmoid away from saturation
    rng = np.random.default_rng(0)
    result = train(train_ds, spec, config, rng=rng, theta0=init_params(spec, rng, scale=1 / 20))
    _, Yhat = open_loop_predict(spec, result.theta, test_ds, loss, rho_x=1e-2)
    print(f"sigma = {sigma}: best epoch {result.best_epoch}, "
          f"test accuracy {100 * accuracy(test_ds.Y, Yhat[0]):.2f}%")
