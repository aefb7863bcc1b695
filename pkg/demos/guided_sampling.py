"""Steer samples toward one class with SMC and a flow-map lookahead.

    python demos/guided_sampling.py

Trains a short model on the two-class parity toy (class 0 means the first
digit is 0, about a third of the data), fits a logistic classifier on
clean samples, then compares class frequencies with and without guidance
for each lookahead mode.
"""

import numpy as np

from catflowmap.data import make_two_class_dataset
from catflowmap.guidance import SMCConfig, fit_logistic, guided_sample
from catflowmap.losses import LossConfig
from catflowmap.predictor import Predictor, PredictorConfig
from catflowmap.sampler import TimeGrid, sample_sde
from catflowmap.trainer import TrainConfig, run_training

ds = make_two_class_dataset(4, 3)
pcfg = PredictorConfig(D=4, K=3, width=128, activation="relu")
ckpt = run_training(pcfg, TrainConfig(steps=6000, lr=3e-3, warmup_steps=200), LossConfig(), ds)
net = Predictor(pcfg, ckpt.ema)

rng = np.random.default_rng(0)
states = ds.sample_states(rng, 20_000)
reward = fit_logistic(np.eye(3)[states], ds.label(states), target=0)

grid = TimeGrid.uniform(16)
n = 2000
plain = sample_sde(net, 1, grid, n, 4, 3)
print(f"unguided     class-0 {np.mean(ds.label(plain.states) == 0):.3f}  "
      f"valid {np.mean(ds.is_valid(plain.states)):.3f}")
for mode in ("flowmap", "denoiser", "none"):
    out = guided_sample(net, reward, grid, 8, n, 4, 3, SMCConfig(lookahead=mode), seed=2)
    print(f"{mode:12s} class-0 {np.mean(ds.label(out.states) == 0):.3f}  "
          f"valid {np.mean(ds.is_valid(out.states)):.3f}  resamples {out.n_resamples}")
