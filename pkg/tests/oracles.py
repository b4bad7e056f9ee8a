"""Plain-numpy reference implementations used as independent test oracles."""

import numpy as np

from mgic.autograd import Tensor, no_grad
from mgic.ops import conv2d_direct


def np_batch_norm(x, gamma, beta, eps=1e-5):
    """Train-mode batch norm with biased batch variance."""
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def np_simple_block(x, block):
    """x + K relu(N(x)) for a SimpleConvBlock, from its raw arrays."""
    h = np_batch_norm(x, block.norm.gamma.data, block.norm.beta.data)
    h = np.maximum(h, 0)
    k = block.conv
    return x + conv2d_direct(h, k.weight.data, padding=k.padding, groups=k.groups)


def two_level_transcription(block, x):
    """x1 = R x; x1 <- block(x1); x <- x + N(P(x1 - R x)); return grouped block(x)."""
    (level,) = block.levels
    R, P = level.transfer.R, level.transfer.P
    x1 = conv2d_direct(x, R.weight.data, groups=R.groups)
    x1 = np_simple_block(x1, block.coarse)
    residual = x1 - conv2d_direct(x, R.weight.data, groups=R.groups)
    x = x + np_batch_norm(conv2d_direct(residual, P.weight.data, groups=P.groups),
                          level.norm.gamma.data, level.norm.beta.data)
    return np_simple_block(x, level.relax)


def channel_sensitivity(module, c, rng, samples=16, delta=1e-6):
    """S[i, o] = max over samples of |d y_o / d x_i|, by central differences.

    Inputs are random 1x1 maps.  The module runs in eval mode so each sample
    is mapped on its own; taking the maximum over samples keeps an entry
    from vanishing only because a relu happens to be inactive at one point.
    """
    module.eval()
    x = rng.standard_normal((samples, c, 1, 1))
    sens = np.zeros((c, c))
    with no_grad():
        for i in range(c):
            up, down = x.copy(), x.copy()
            up[:, i] += delta
            down[:, i] -= delta
            diff = module(Tensor(up)).data - module(Tensor(down)).data
            sens[i] = np.abs(diff.reshape(samples, c)).max(axis=0) / (2 * delta)
    return sens


def randomize_norms(module, rng, c=None, samples=64):
    """Random affine terms on every batch norm, running stats from real data.

    With ``c`` given, one train-mode pass over random 1x1 inputs sets each
    norm's running statistics to its batch statistics (momentum 1), so eval
    mode sees standardized pre-activations; otherwise they are drawn at
    random.
    """
    norms = [mod for _, mod in module.named_modules() if hasattr(mod, "running_mean")]
    for mod in norms:
        mod.gamma.data[...] = rng.uniform(0.5, 1.5, mod.gamma.shape)
        mod.beta.data[...] = rng.standard_normal(mod.beta.shape) * 0.2
        mod.running_mean[...] = rng.standard_normal(mod.running_mean.shape) * 0.5
        mod.running_var[...] = rng.uniform(0.5, 2.0, mod.running_var.shape)
    if c is not None:
        saved = [mod.momentum for mod in norms]
        for mod in norms:
            mod.momentum = 1.0
        module.train()
        with no_grad():
            module(Tensor(rng.standard_normal((samples, c, 1, 1))))
        for mod, m in zip(norms, saved):
            mod.momentum = m
    module.eval()
