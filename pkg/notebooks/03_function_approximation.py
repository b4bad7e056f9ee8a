"""
Learning a 2-D surface with a small MGIC network
================================================

Fits f(x, y) = cos(x) sin(20 y) on a few thousand points, then saves the
trained weights to a checkpoint and reloads them.  This is a shortened
version of the ``mgic approx`` experiment.
"""

import os
import tempfile

import numpy as np

from mgic.autograd import Tensor, no_grad
from mgic.checkpoint import load_checkpoint, save_checkpoint
from mgic.config import resolve
from mgic.experiments import run_approx

# default approximation settings, trimmed to run in a few seconds
section, seed = resolve({"approx": {"n": 2000, "n_eval": 500, "epochs": 5, "lr": 1e-3}}, "approx")
model, history = run_approx(section, seed, "mgic", log=print)

# eval MSE should already have dropped from epoch 0
print("epoch-0 mse:", history[0]["eval_metric"], "final mse:", history[-1]["eval_metric"])

# round trip through the binary checkpoint format
path = os.path.join(tempfile.mkdtemp(), "approx.ckpt")
save_checkpoint(model, path)
restored = load_checkpoint(path)
probe = Tensor(np.random.default_rng(1).uniform(size=(8, 2, 1, 1)).astype(np.float32))
model.eval()
restored.eval()
with no_grad():
    same = np.array_equal(model(probe).data, restored(probe).data)
print("checkpoint outputs identical:", same)
