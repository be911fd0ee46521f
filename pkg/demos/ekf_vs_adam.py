#!/usr/bin/env python3
"""EKF training against Adam on a saturated nonlinear benchmark.

Both trainers start from the same Xavier-initialized recurrent network
(four states, one hidden layer of six atan units in each map). The EKF sees
the data for 25 epochs, Adam runs 500 epochs on the condensed objective.
Each keeps the parameters of its lowest-objective epoch, which are then
scored by open-loop simulation on the test half.

Run: python3 demos/ekf_vs_adam.py  (a couple of minutes per seed)
"""

import sys

import numpy as np

from ekfrnn.data import bfr, gen_nonlinear_benchmark, split_train_test, standardize
from ekfrnn.ekf import EkfConfig, train
from ekfrnn.gd import train_gd
from ekfrnn.init_state import open_loop_predict
from ekfrnn.models import RnnSpec, init_params
from ekfrnn.objectives import L2Reg

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 1)

train_ds, test_ds = split_train_test(gen_nonlinear_benchmark(0))
train_ds, scaling = standardize(train_ds)
test_ds, _ = standardize(test_ds, scaling)

spec = RnnSpec(n_u=1, n_y=1, n_x=4, hidden_x=(6,), hidden_y=(6,), act_x="atan", act_y="atan")
regs = (L2Reg(1e-3, 1e-3),)


def test_fit(theta):
    _, Yhat = open_loop_predict(spec, theta, test_ds, rho_x=1e-3)
    return bfr(test_ds.Y, Yhat[0])


for seed in seeds:
    theta0 = init_params(spec, np.random.default_rng(seed))
    ekf = train(train_ds, spec, EkfConfig(regs=regs, epochs=25),
                rng=np.random.default_rng(seed), theta0=theta0)
    adam = train_gd(train_ds, spec, mode="condensed", optimizer="adam", epochs=500, lr=0.005,
                    regs=regs, rng=np.random.default_rng(seed), theta0=theta0)
    print(f"seed {seed}: EKF test BFR {test_fit(ekf.theta):.2f} "
          f"(wall {ekf.log[-1]['wall_time']:.0f} s), "
          f"Adam test BFR {test_fit(adam.theta):.2f} (wall {adam.log[-1]['wall_time']:.0f} s)")
