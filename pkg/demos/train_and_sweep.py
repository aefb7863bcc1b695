"""Train a flow map on parity(4, 3) and compare few-step samplers.

    python demos/train_and_sweep.py [steps]

Prints total variation to the true distribution for flow-map jumps and
Euler integration at several step counts.  With the default 6000 steps
this takes under two minutes; the acceptance configuration uses 55000.
"""

import sys
import time

from catflowmap.data import make_parity_dataset
from catflowmap.evaluate import nfe_sweep, sweep_table
from catflowmap.losses import LossConfig
from catflowmap.predictor import Predictor, PredictorConfig
from catflowmap.trainer import TrainConfig, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 6000

ds = make_parity_dataset(4, 3)
pcfg = PredictorConfig(D=4, K=3, width=256, depth=3, activation="relu")
# half the time pairs uniform: the one-step jump (0, 1) needs long pairs
tcfg = TrainConfig(steps=steps, lr=2e-3, warmup_steps=200, uniform_time_fraction=0.5,
                   log_every=max(1, steps // 10))

start = time.time()
ckpt = run_training(pcfg, tcfg, LossConfig(kind="ecld"), ds)
print(f"trained {steps} steps in {time.time() - start:.0f}s")

net = Predictor(pcfg, ckpt.ema)
rows = nfe_sweep(net, ds, ["flowmap", "euler"], [1, 2, 4, 8], n=20_000, seed=1)
print(sweep_table(rows))

# untrained reference: every slice is uniform, argmax picks category 0
blank = Predictor(pcfg)
print("untrained flow map, 1 step:",
      round(nfe_sweep(blank, ds, ["flowmap"], [1], n=1000)[0].tv, 3))
