"""Multigrid-in-channels blocks.

A block built at width ``c`` keeps a hierarchy of channel widths
``c, c/2, ..., c/2**n``.  Going down, grouped 1x1 restrictions halve the
width.  The coarsest level runs the reference block fully coupled.  Going
up, each level adds a normalized, prolongated coarse correction and then
runs the reference block grouped with group size ``s_g``.
"""

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .autograd import relu
from .errors import ConfigurationError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, ReLU, Sequential

__all__ = [
    "BlockTemplate",
    "MgicConfig",
    "SimpleConvBlock",
    "BottleneckBlock",
    "SequenceBlock",
    "TransferPair",
    "MgicLevel",
    "MgicBlock",
    "ChannelShortcut",
    "num_levels",
    "level_widths",
    "effective_group_size",
    "init_transfer",
    "build_mgic_block",
    "resnet_bottleneck_forward",
    "make_identity_",
]


def num_levels(c_in, s_c):
    """floor(log2(c_in / s_c)), computed in integers."""
    if s_c < 1 or c_in < s_c:
        raise ConfigurationError(f"need c_in >= s_c >= 1, got c_in={c_in}, s_c={s_c}")
    n = 0
    while c_in >= s_c << (n + 1):
        n += 1
    return n


def level_widths(c_in, s_c):
    """Channel widths of every level, finest first, coarsest last."""
    n = num_levels(c_in, s_c)
    widths = [c_in]
    for j in range(n):
        if widths[-1] % 2:
            raise ConfigurationError(f"level {j} width {widths[-1]} cannot be halved")
        widths.append(widths[-1] // 2)
    return widths


def effective_group_size(s_g, widths):
    """Largest integer <= s_g dividing every width (1 at worst)."""
    widths = list(widths)
    if not widths or min(widths) < 1:
        raise ConfigurationError(f"widths must be non-empty and positive, got {widths}")
    common = 0
    for w in widths:
        common = math.gcd(common, int(w))
    for size in range(min(int(s_g), common), 0, -1):
        if common % size == 0:
            return size
    return 1


# -- reference blocks ------------------------------------------------------------


def _pad(d):
    if d % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd for same padding, got {d}")
    return (d - 1) // 2


def _groups(width, group_size):
    if group_size < 1 or width % group_size:
        raise ConfigurationError(f"group size {group_size} does not divide width {width}")
    return width // group_size


class SimpleConvBlock(Module):
    """Pre-activation residual conv: ``x + K(relu(N(x)))``, K grouped d x d."""

    def __init__(self, width, group_size, d=3, rng=None, dtype=np.float32):
        super().__init__()
        groups = _groups(width, group_size)
        self.width, self.group_size = width, group_size
        self.norm = BatchNorm2d(width, dtype=dtype)
        self.conv = Conv2d(width, width, d, padding=_pad(d), groups=groups, rng=rng, dtype=dtype)

    def forward(self, x):
        return x + self.conv(relu(self.norm(x)))

    def zero_residual_(self):
        self.conv.weight.data[...] = 0


def resnet_bottleneck_forward(x, k1, k2, k3, norms):
    """x + K3 relu(N3(K2 relu(N2(K1 relu(N1(x)))))).

    ``k1``..``k3`` are convolution layers (their group counts define the
    coupling); ``norms`` is the triple (N1, N2, N3).
    """
    n1, n2, n3 = norms
    h = k1(relu(n1(x)))
    h = k2(relu(n2(h)))
    h = k3(relu(n3(h)))
    return x + h


class BottleneckBlock(Module):
    """Pre-activation bottleneck with hidden width ``expansion * width``.

    All three convolutions use ``width / group_size`` groups, so the block is
    fully coupled exactly when ``group_size == width``.
    """

    def __init__(self, width, group_size, expansion=1.0, d=3, rng=None, dtype=np.float32):
        super().__init__()
        groups = _groups(width, group_size)
        mid = int(round(expansion * width))
        if mid < 1 or mid % groups:
            raise ConfigurationError(
                f"hidden width {mid} is not divisible into {groups} groups"
            )
        self.width, self.group_size, self.mid = width, group_size, mid
        self.norm1 = BatchNorm2d(width, dtype=dtype)
        self.conv1 = Conv2d(width, mid, 1, groups=groups, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm2d(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, mid, d, padding=_pad(d), groups=groups, rng=rng, dtype=dtype)
        self.norm3 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, width, 1, groups=groups, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.width:
            raise DimensionError(f"bottleneck expects {self.width} channels, got {x.shape[1]}")
        return resnet_bottleneck_forward(
            x, self.conv1, self.conv2, self.conv3, (self.norm1, self.norm2, self.norm3)
        )

    def zero_residual_(self):
        self.conv3.weight.data[...] = 0


class SequenceBlock(Module):
    """Plain chain of width-preserving layers: ``conv<d>``, ``bn``, ``relu``."""

    def __init__(self, width, group_size, layers, rng=None, dtype=np.float32):
        super().__init__()
        groups = _groups(width, group_size)
        built = []
        for spec in layers:
            if spec == "bn":
                built.append(BatchNorm2d(width, dtype=dtype))
            elif spec == "relu":
                built.append(ReLU())
            elif spec.startswith("conv"):
                d = int(spec[4:] or 3)
                built.append(Conv2d(width, width, d, padding=_pad(d), groups=groups, rng=rng, dtype=dtype))
            else:
                raise ConfigurationError(f"unknown layer spec {spec!r}")
        self.body = Sequential(*built)

    def forward(self, x):
        return self.body(x)


@dataclass(frozen=True)
class BlockTemplate:
    """Description of the reference block an MGIC block wraps.

    ``variant`` is ``"simple"`` (one residual d x d conv), ``"bottleneck"``
    or ``"sequence"`` (``layers`` lists the layer specs).
    """

    variant: str = "simple"
    d: int = 3
    expansion: float = 1.0
    layers: tuple = ()

    def __post_init__(self):
        if self.variant not in ("simple", "bottleneck", "sequence"):
            raise ConfigurationError(f"unknown template variant {self.variant!r}")
        if self.variant == "sequence" and not self.layers:
            raise ConfigurationError("sequence template needs at least one layer")

    def instantiate(self, width, group_size=None, rng=None, dtype=np.float32):
        """Build the block at ``width`` channels; ``group_size=None`` couples fully."""
        group_size = width if group_size is None else group_size
        if self.variant == "simple":
            return SimpleConvBlock(width, group_size, self.d, rng=rng, dtype=dtype)
        if self.variant == "bottleneck":
            return BottleneckBlock(width, group_size, self.expansion, self.d, rng=rng, dtype=dtype)
        return SequenceBlock(width, group_size, self.layers, rng=rng, dtype=dtype)

    def to_dict(self):
        out = asdict(self)
        out["layers"] = list(self.layers)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["layers"] = tuple(data.get("layers", ()))
        return cls(**data)


@dataclass(frozen=True)
class MgicConfig:
    s_g: int
    s_c: int
    template: BlockTemplate = field(default_factory=BlockTemplate)
    correction_gamma: float = 1.0  # initial scale of the correction-path norms

    def __post_init__(self):
        if self.s_g < 1 or self.s_c < 1:
            raise ConfigurationError(f"s_g and s_c must be positive, got {self.s_g}, {self.s_c}")

    @property
    def d(self):
        return self.template.d

    def clamped(self, c_in):
        """Copy with s_g reduced so it divides every grouped level width."""
        grouped = level_widths(c_in, self.s_c)[:-1]
        if not grouped:
            return self
        return replace(self, s_g=effective_group_size(self.s_g, grouped))

    def to_dict(self):
        return {"s_g": self.s_g, "s_c": self.s_c, "template": self.template.to_dict(),
                "correction_gamma": self.correction_gamma}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["s_g"]), int(data["s_c"]), BlockTemplate.from_dict(data.get("template", {})),
                   float(data.get("correction_gamma", 1.0)))


# -- transfers -------------------------------------------------------------------


class TransferPair(Module):
    """Restriction R (c -> c/2) and prolongation P (c/2 -> c), both grouped 1x1.

    Both use ``c / s_g`` groups; R maps each group of ``s_g`` channels to
    ``s_g / 2`` and P mirrors it.
    """

    def __init__(self, width, s_g, rng=None, dtype=np.float32):
        super().__init__()
        if s_g < 2 or s_g % 2:
            raise ConfigurationError(f"transfer group size must be even, got s_g={s_g}")
        groups = _groups(width, s_g)
        self.width, self.s_g = width, s_g
        self.R = Conv2d(width, width // 2, 1, groups=groups, rng=rng, dtype=dtype)
        self.P = Conv2d(width // 2, width, 1, groups=groups, rng=rng, dtype=dtype)
        self.R.weight.decay = False
        self.P.weight.decay = False

    def restrict(self, x):
        return self.R(x)

    def prolong(self, x):
        return self.P(x)


def _row_stochastic(rng, shape, dtype):
    w = rng.uniform(0.5, 1.5, size=shape)
    w /= w.sum(axis=1, keepdims=True)
    return w.astype(dtype)


def init_transfer(width, s_g, rng, dtype=np.float32):
    """TransferPair whose weights are positive with unit row sums.

    Entries are drawn uniformly from [0.5, 1.5] and each output channel's
    incoming weights are normalized to sum to one.
    """
    pair = TransferPair(width, s_g, rng=rng, dtype=dtype)
    for conv in (pair.R, pair.P):
        conv.weight.data[...] = _row_stochastic(rng, conv.weight.shape, dtype)
    return pair


# -- the block ---------------------------------------------------------------------


class MgicLevel(Module):
    """Everything owned by one non-coarsest level."""

    def __init__(self, width, s_g, template, rng, dtype, correction_gamma=1.0):
        super().__init__()
        self.width = width
        self.transfer = init_transfer(width, s_g, rng, dtype)
        self.norm = BatchNorm2d(width, dtype=dtype)
        self.norm.gamma.data[...] = correction_gamma
        self.relax = template.instantiate(width, s_g, rng=rng, dtype=dtype)


class MgicBlock(Module):
    """One V-cycle over a channel hierarchy; maps c_in -> c_in channels."""

    def __init__(self, c_in, config, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.c_in = c_in
        self.config = config
        self.widths = level_widths(c_in, config.s_c)
        self.n_levels = len(self.widths) - 1
        s_g = config.s_g
        for j, w in enumerate(self.widths[:-1]):
            if s_g % 2 or w % s_g:
                raise ConfigurationError(
                    f"s_g={s_g} incompatible with level {j} (width {w}); "
                    f"group size must be even and divide every grouped level"
                )
        self.levels = [MgicLevel(w, s_g, config.template, rng, dtype, config.correction_gamma)
                       for w in self.widths[:-1]]
        for j, lvl in enumerate(self.levels):
            setattr(self, f"level{j}", lvl)
        self.coarse = config.template.instantiate(self.widths[-1], None, rng=rng, dtype=dtype)

    @property
    def transfers(self):
        return [lvl.transfer for lvl in self.levels]

    @property
    def relaxations(self):
        return [lvl.relax for lvl in self.levels]

    @property
    def correction_norms(self):
        return [lvl.norm for lvl in self.levels]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise DimensionError(f"MGIC block expects [N, {self.c_in}, H, W], got {x.shape}")
        # restricted[j] = R_{j-1} x^(j-1), kept for the residual on the way up
        restricted = [x]
        for lvl in self.levels:
            restricted.append(lvl.transfer.restrict(restricted[-1]))
        coarse = self.coarse(restricted[-1])
        for j in reversed(range(self.n_levels)):
            lvl = self.levels[j]
            residual = coarse - restricted[j + 1]
            fine = restricted[j] + lvl.norm(lvl.transfer.prolong(residual))
            coarse = lvl.relax(fine)
        return coarse


def build_mgic_block(c_in, config, rng=None, dtype=np.float32, clamp=False):
    """Construct an :class:`MgicBlock` and name its parameters.

    With ``clamp=True`` the group size is first reduced by
    :func:`effective_group_size` over the grouped level widths.
    """
    if clamp:
        config = config.clamped(c_in)
    block = MgicBlock(c_in, config, rng=rng, dtype=dtype)
    return block.assign_names()


def make_identity_(block):
    """Zero every residual branch and the correction path (in place)."""
    for mod in block.modules():
        if hasattr(mod, "zero_residual_"):
            mod.zero_residual_()
    for norm in getattr(block, "correction_norms", []):
        norm.gamma.data[...] = 0
        norm.beta.data[...] = 0
    return block


class ChannelShortcut(Module):
    """Grouped d x d convolution changing c_in -> c_out, optionally with stride 2.

    Groups are gcd(c_in, c_out), which is depth-wise when c_out is a multiple
    of c_in.
    """

    def __init__(self, c_in, c_out, stride=1, kernel_size=3, rng=None, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f"shortcut stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv = Conv2d(c_in, c_out, kernel_size, stride=stride, padding=_pad(kernel_size),
                           groups=math.gcd(c_in, c_out), rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(x)

    def set_identity_(self):
        """Center-tap unit kernels; the identity map when c_in == c_out."""
        w = self.conv.weight.data
        w[...] = 0
        k = w.shape[-1] // 2
        w[:, 0, k, k] = 1.0
        return self


def channel_shortcut(x, c_out, stride, layer):
    if layer.c_out != c_out or layer.stride != stride:
        raise ConfigurationError(
            f"shortcut built for c_out={layer.c_out}, stride={layer.stride}; "
            f"asked for c_out={c_out}, stride={stride}"
        )
    return layer(x)
