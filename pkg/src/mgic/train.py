"""SGD with momentum, learning-rate schedules and the training loop."""

import math
from dataclasses import dataclass, asdict

import numpy as np

from .autograd import Tensor, no_grad
from .errors import ConfigurationError, DivergenceError
from . import ops

__all__ = [
    "SgdConfig",
    "Sgd",
    "sgd_step",
    "lr_at",
    "seed_streams",
    "batches",
    "evaluate",
    "train_loop",
    "mse_first_component",
    "cross_entropy",
    "accuracy",
]


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "constant"  # or "step"
    step_every: int = 30
    step_factor: float = 10.0
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.schedule not in ("constant", "step"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


def lr_at(epoch, config):
    """Learning rate for a 0-based epoch index.

    The step schedule divides the base rate by ``step_factor`` every
    ``step_every`` epochs.
    """
    if epoch < 0:
        raise ConfigurationError("epoch must be non-negative")
    if config.schedule == "constant":
        return config.lr
    return config.lr * config.step_factor ** -(epoch // config.step_every)


def sgd_step(params, state, config, lr=None):
    """One momentum-SGD update, in place.

    ``v <- momentum * v + (g + weight_decay * w)`` then ``w <- w - lr * v``.
    Decay applies only to parameters flagged with ``decay``.  ``state`` maps
    ``id(param)`` to its velocity and is created on first use.
    """
    lr = config.lr if lr is None else lr
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {getattr(p, 'name', '') or 'parameter'}",
                                  parameter=getattr(p, "name", None))
        if config.weight_decay and getattr(p, "decay", False):
            g = g + config.weight_decay * p.data
        v = state.get(id(p))
        if v is None or config.momentum == 0:
            v = np.array(g, dtype=p.dtype, copy=True)
        else:
            v *= config.momentum
            v += g
        state[id(p)] = v
        p.data -= (lr * v).astype(p.dtype, copy=False)
    return state


class Sgd:
    """Holds the velocity state for a fixed parameter list."""

    def __init__(self, params, config):
        self.params = list(params)
        self.config = config
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        sgd_step(self.params, self.state, self.config, lr)


def seed_streams(seed):
    """Independent generators for (initialization, data, shuffling)."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def batches(n, batch_size, rng=None):
    """Index arrays covering range(n) once; shuffled when ``rng`` is given.

    A final batch of a single sample is merged into the previous one so that
    batch statistics stay defined.
    """
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


# -- losses and metrics --------------------------------------------------------------


def mse_first_component(output, targets):
    """MSE between output channel 0 and scalar targets."""
    n = output.shape[0]
    pred = output.reshape(n, -1)[:, 0]
    return ops.mse_loss(pred, Tensor(np.asarray(targets, dtype=output.dtype)))


def cross_entropy(output, targets):
    return ops.softmax_cross_entropy(output, targets)


def accuracy(output, targets):
    return float(np.mean(np.argmax(output.data, axis=1) == np.asarray(targets)))


def evaluate(model, data, metric, batch_size=1024):
    """Metric averaged over ``data`` in eval mode, batch-size weighted."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with no_grad():
            for idx in batches(len(data), batch_size):
                out = model(Tensor(data.inputs[idx]))
                value = metric(out, data.targets[idx])
                value = float(value.data) if isinstance(value, Tensor) else float(value)
                total += value * len(idx)
                count += len(idx)
    finally:
        model.train(was_training)
    return total / max(count, 1)


def train_loop(model, data, config, loss_fn, eval_data=None, metric=None,
               shuffle_rng=None, log=None):
    """Train ``model`` with momentum SGD.

    Returns a list of dicts ``{"epoch", "lr", "train_loss", "eval_metric"}``.
    Row 0 is the untrained model (both columns evaluated in eval mode);
    row ``e`` holds the mean batch loss of epoch ``e`` and the eval metric
    after it.
    """
    metric = metric or loss_fn
    eval_data = eval_data if eval_data is not None else data
    shuffle_rng = shuffle_rng if shuffle_rng is not None else seed_streams(config.seed)[2]
    opt = Sgd(model.parameters(), config)

    history = [{
        "epoch": 0,
        "lr": lr_at(0, config),
        "train_loss": evaluate(model, data, loss_fn),
        "eval_metric": evaluate(model, eval_data, metric),
    }]
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        model.train()
        losses, weights = [], []
        for idx in batches(len(data), config.batch_size, shuffle_rng):
            out = model(Tensor(data.inputs[idx]))
            loss = loss_fn(out, data.targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch + 1}", last_good_epoch=epoch
                )
            opt.zero_grad()
            loss.backward()
            try:
                opt.step(lr)
            except DivergenceError as exc:
                exc.last_good_epoch = epoch
                raise
            losses.append(value)
            weights.append(len(idx))
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": float(np.average(losses, weights=weights)) if losses else float("nan"),
            "eval_metric": evaluate(model, eval_data, metric),
        }
        history.append(row)
        if log is not None:
            log(row)
    return history
