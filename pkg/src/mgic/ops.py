"""Differentiable neural-network primitives on NCHW arrays.

Grouped convolution runs through im2col + batched matmul; ``conv2d_direct``
is a deliberately naive loop implementation kept as an oracle for tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, apply_op, _coerce
from .errors import ConfigurationError, DimensionError, ContractError

__all__ = [
    "conv2d",
    "conv2d_direct",
    "conv_output_size",
    "batch_norm",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "linear",
    "mse_loss",
    "softmax_cross_entropy",
]


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            f"non-positive output extent: size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding}"
        )
    return out


def _check_conv(x_shape, w_shape, groups):
    if len(x_shape) != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {x_shape}")
    c_out, cin_g, kh, kw = w_shape
    c_in = x_shape[1]
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"groups={groups} must divide c_in={c_in} and c_out={c_out}"
        )
    if cin_g * groups != c_in:
        raise DimensionError(
            f"weight {w_shape} with groups={groups} expects {cin_g * groups} "
            f"input channels, got {c_in}"
        )


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, C, Hp-kh+1, Wp-kw+1, kh, kw) view -> (N, C, kh, kw, ho, wo) copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation with symmetric zero padding.

    ``weight`` has shape ``[c_out, c_in // groups, kh, kw]``; output channel
    ``o`` of group ``q`` only reads input channels of group ``q``.
    """
    _check_conv(x.shape, weight.shape, groups)
    n, c_in, h, w = x.shape
    c_out, cin_g, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    g = groups
    cout_g = c_out // g
    k = cin_g * kh * kw
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        _coerce(x, bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")

    # columns are laid out as (g, k, n * P) so each group is one large matmul
    def fwd(xd, wd, bd=None):
        wm = wd.reshape(g, cout_g, k)
        if pointwise:
            cols = xd.reshape(n, g, k, h * w)
        else:
            xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
            cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, g, k, ho * wo)
        cols = cols.transpose(1, 2, 0, 3).reshape(g, k, n * ho * wo)
        out = np.matmul(wm, cols).reshape(g, cout_g, n, ho * wo)
        out = out.transpose(2, 0, 1, 3).reshape(n, c_out, ho, wo)
        if bd is not None:
            out = out + bd.reshape(1, c_out, 1, 1)
        return out, (cols, wm)

    def bwd(ctx, grad):
        cols, wm = ctx
        gm = grad.reshape(n, g, cout_g, ho * wo).transpose(1, 2, 0, 3).reshape(g, cout_g, n * ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(weight.shape)
        dcols = np.matmul(wm.transpose(0, 2, 1), gm).reshape(g, k, n, ho * wo).transpose(2, 0, 1, 3)
        if pointwise:
            gx = dcols.reshape(n, c_in, h, w)
        else:
            dcols = dcols.reshape(n, c_in, kh, kw, ho, wo)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, c_in, hp, wp), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, grad.sum(axis=(0, 2, 3))

    return apply_op(
        "conv2d", inputs, fwd, bwd, stride=stride, padding=padding, groups=groups
    )


def conv2d_direct(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Reference convolution by explicit loops over (n, o, i, y, x, ky, kx).

    Plain numpy, no autograd; slow by design.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    _check_conv(x.shape, weight.shape, groups)
    n, c_in, h, w = x.shape
    c_out, cin_g, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cout_g = c_out // groups
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            q = o // cout_g
            for i in range(cin_g):
                c = q * cin_g + i
                for yo in range(ho):
                    for xo in range(wo):
                        acc = 0.0
                        for ky in range(kh):
                            yi = yo * stride + ky - padding
                            if yi < 0 or yi >= h:
                                continue
                            for kx in range(kw):
                                xi = xo * stride + kx - padding
                                if 0 <= xi < w:
                                    acc += x[b, c, yi, xi] * weight[o, i, ky, kx]
                        out[b, o, yo, xo] += acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of rank-2 or rank-4 input.

    In training mode the batch is standardized with the biased variance and
    the running buffers (plain arrays) are updated in place with the unbiased
    estimate.  In eval mode the running buffers define a fixed affine map.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch norm expects rank 2 or 4 input, got rank {x.ndim}")
    shape = x.shape
    n, c = shape[0], shape[1]
    m = x.size // (n * c)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch norm over {c} channels got gamma {gamma.shape}")
    count = n * m
    # work on an (n, c, m) view; m == 1 collapses to a cheaper 2-D layout
    if m == 1:
        view, axes, bshape = (n, c), 0, (1, c)
    else:
        view, axes, bshape = (n, c, m), (0, 2), (1, c, 1)

    if training:
        if count < 2:
            raise ContractError("batch norm in train mode needs more than one value per channel")
        stats = {}

        def fwd(xd, gd, bd):
            xv = xd.reshape(view)
            mean = xv.mean(axis=axes)
            xc = xv - mean.reshape(bshape)
            var = np.einsum("ij,ij->j", xc, xc) / count if m == 1 else (xc * xc).mean(axis=axes)
            stats["mean"], stats["var"] = mean, var
            inv = 1.0 / np.sqrt(var + eps)
            xhat = xc * inv.reshape(bshape)
            out = xhat * gd.reshape(bshape) + bd.reshape(bshape)
            return out.reshape(shape), (xhat, inv, gd)

        def bwd(ctx, g):
            xhat, inv, gd = ctx
            gv = g.reshape(view)
            dbeta = gv.sum(axis=axes)
            dgamma = (gv * xhat).sum(axis=axes)
            # dx = gamma * inv / count * (count * g - sum(g) - xhat * sum(g * xhat))
            scale = (gd * inv / count).reshape(bshape)
            dx = scale * (count * gv - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
            return dx.reshape(shape), dgamma, dbeta

        out = apply_op("batch_norm", (x, gamma, beta), fwd, bwd, training=True, eps=eps)
        mean, var = stats["mean"], stats["var"]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
        return out

    rm = running_mean.astype(x.dtype, copy=True)
    rv = running_var.astype(x.dtype, copy=True)

    def fwd_eval(xd, gd, bd):
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (xd.reshape(view) - rm.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gd.reshape(bshape) + bd.reshape(bshape)
        return out.reshape(shape), (xhat, inv, gd)

    def bwd_eval(ctx, g):
        xhat, inv, gd = ctx
        gv = g.reshape(view)
        return (
            (gv * (gd * inv).reshape(bshape)).reshape(shape),
            (gv * xhat).sum(axis=axes),
            gv.sum(axis=axes),
        )

    return apply_op("batch_norm", (x, gamma, beta), fwd_eval, bwd_eval, training=False, eps=eps)


def _pool_windows(xd, k, stride):
    n, c, h, w = xd.shape
    ho = conv_output_size(h, k, stride, 0)
    wo = conv_output_size(w, k, stride, 0)
    win = sliding_window_view(xd, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.reshape(n, c, ho, wo, k * k), ho, wo


def _scatter_windows(gw, shape, k, stride, ho, wo):
    n, c, h, w = shape
    gx = np.zeros(shape, dtype=gw.dtype)
    gw = gw.reshape(n, c, ho, wo, k, k)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gw[..., i, j]
    return gx


def max_pool2d(x, kernel, stride=None):
    """Max pooling without padding; ties resolve to the first maximum."""
    stride = stride or kernel
    shape = x.shape

    def fwd(xd):
        win, ho, wo = _pool_windows(xd, kernel, stride)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, ho, wo)

    def bwd(ctx, g):
        idx, ho, wo = ctx
        gw = np.zeros(g.shape + (kernel * kernel,), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (_scatter_windows(gw, shape, kernel, stride, ho, wo),)

    return apply_op("max_pool2d", (x,), fwd, bwd, kernel=kernel, stride=stride)


def avg_pool2d(x, kernel, stride=None):
    stride = stride or kernel
    shape = x.shape
    area = kernel * kernel

    def fwd(xd):
        win, ho, wo = _pool_windows(xd, kernel, stride)
        return win.mean(axis=-1), (ho, wo)

    def bwd(ctx, g):
        ho, wo = ctx
        gw = np.repeat(g[..., None] / area, area, axis=-1)
        return (_scatter_windows(gw, shape, kernel, stride, ho, wo),)

    return apply_op("avg_pool2d", (x,), fwd, bwd, kernel=kernel, stride=stride)


def global_avg_pool(x):
    """Average over H and W: [N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape

    def fwd(xd):
        return xd.mean(axis=(2, 3)), None

    def bwd(ctx, g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return apply_op("global_avg_pool", (x,), fwd, bwd)


def linear(x, weight, bias=None):
    """x @ weight.T + bias for x of shape [N, c_in] and weight [c_out, c_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fwd(xd, wd, bd=None):
        out = xd @ wd.T
        if bd is not None:
            out = out + bd
        return out, (xd, wd)

    def bwd(ctx, g):
        xd, wd = ctx
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return apply_op("linear", inputs, fwd, bwd)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    pred, target = _coerce(pred, target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    m = pred.size

    def fwd(p, t):
        diff = p - t
        return np.asarray(np.mean(diff * diff)), diff

    def bwd(diff, g):
        gp = g * 2.0 / m * diff
        return gp, -gp

    return apply_op("mse_loss", (pred, target), fwd, bwd)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels must lie in [0, {k})")
    rows = np.arange(n)

    def fwd(z):
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        return np.asarray(-logp[rows, labels].mean()), logp

    def bwd(logp, g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return apply_op("softmax_cross_entropy", (logits,), fwd, bwd)
