"""Networks used by the experiments, built from JSON-able architecture dicts.

Every builder returns a module whose ``arch`` attribute holds the dict it
was built from, so a checkpoint can re-create the same network.
"""

import numpy as np

from .core import (
    BlockTemplate,
    ChannelShortcut,
    MgicConfig,
    build_mgic_block,
    effective_group_size,
    init_transfer,
    level_widths,
)
from .cost import count_params
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, Sequential

__all__ = [
    "ApproxNet",
    "Classifier",
    "TransferChain",
    "build_model",
    "matched_group_size",
    "approx_width",
]


def approx_width(alpha):
    """Block width alpha * 160, rounded to a multiple of 8."""
    return max(8, int(round(alpha * 160 / 8)) * 8)


def matched_group_size(width, target_params, template):
    """Group size whose grouped-only block has the parameter count closest to
    ``target_params`` (ties go to the larger group)."""
    best = None
    for s in range(1, width + 1):
        if width % s:
            continue
        try:
            block = template.instantiate(width, s, rng=np.random.default_rng(0))
        except ConfigurationError:
            continue
        gap = abs(count_params(block) - target_params)
        if best is None or gap <= best[0]:
            best = (gap, s)
    if best is None:
        raise ConfigurationError(f"no valid group size for width {width}")
    return best[1]


def _conv_bn_relu(c_in, c_out, k, rng, dtype, stride=1):
    return Sequential(
        Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, rng=rng, dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
        ReLU(),
    )


def _make_block(kind, width, config, rng, dtype, group_size=None):
    if kind == "mgic":
        return build_mgic_block(width, config, rng=rng, dtype=dtype, clamp=True)
    if kind == "grouped":
        return config.template.instantiate(width, group_size, rng=rng, dtype=dtype)
    if kind == "full":
        return config.template.instantiate(width, None, rng=rng, dtype=dtype)
    raise ConfigurationError(f"unknown block kind {kind!r}")


class ApproxNet(Module):
    """Regressor for 2-D points treated as 1x1 images with two channels.

    stem 1x1 conv -> 16, channel shortcut 16 -> W, two blocks at width W,
    1x1 conv -> 64, 1x1 conv head -> ``head_width``.
    """

    def __init__(self, alpha=0.6, block="mgic", s_g=8, s_c=8, expansion=2.0, d=1,
                 head_width=2, baseline_group_size=None, correction_gamma=1.0, rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        width = approx_width(alpha)
        config = MgicConfig(s_g, s_c, BlockTemplate("bottleneck", d=d, expansion=expansion),
                            correction_gamma)
        if block == "grouped" and baseline_group_size is None:
            probe = build_mgic_block(width, config, rng=np.random.default_rng(0), clamp=True)
            baseline_group_size = matched_group_size(width, count_params(probe), config.template)
        self.width, self.group_size = width, baseline_group_size
        self.stem = _conv_bn_relu(2, 16, 1, rng, dtype)
        self.shortcut = ChannelShortcut(16, width, kernel_size=1, rng=rng, dtype=dtype)
        self.block1 = _make_block(block, width, config, rng, dtype, baseline_group_size)
        self.block2 = _make_block(block, width, config, rng, dtype, baseline_group_size)
        self.neck = _conv_bn_relu(width, 64, 1, rng, dtype)
        self.head = Conv2d(64, head_width, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x):
        x = self.shortcut(self.stem(x))
        x = self.block2(self.block1(x))
        return self.head(self.neck(x))


class Classifier(Module):
    """Small residual image classifier with one block per stage.

    Stages after the first start with a stride-2 channel shortcut.
    """

    def __init__(self, in_channels=1, num_classes=10, widths=(32, 64), block="mgic",
                 s_g=8, s_c=8, template=None, correction_gamma=1.0, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        template = template or BlockTemplate("simple", d=3)
        config = MgicConfig(s_g, s_c, template, correction_gamma)
        self.stem = _conv_bn_relu(in_channels, widths[0], 3, rng, dtype)
        stages = []
        for i, w in enumerate(widths):
            layers = []
            if i > 0:
                layers.append(ChannelShortcut(widths[i - 1], w, stride=2, rng=rng, dtype=dtype))
            layers.append(_make_block(block, w, config, rng, dtype))
            stages.append(Sequential(*layers))
        self.stages = Sequential(*stages)
        self.final = Sequential(BatchNorm2d(widths[-1], dtype=dtype), ReLU(), GlobalAvgPool())
        self.fc = Linear(widths[-1], num_classes, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.fc(self.final(self.stages(self.stem(x))))


class TransferChain(Module):
    """Restrictions down to the coarsest width, then prolongations back up.

    No relaxations, norms or skip connections: a linear autoencoder in
    channel space.  Each level uses the largest group size <= ``s_g``
    dividing its width.
    """

    def __init__(self, c, s_g, s_c, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.widths = level_widths(c, s_c)
        self.group_sizes = []
        for j, w in enumerate(self.widths[:-1]):
            g = effective_group_size(s_g, [w])
            if g % 2:
                raise ConfigurationError(f"s_g={s_g} gives odd group size {g} at level {j} (width {w})")
            self.group_sizes.append(g)
            setattr(self, f"level{j}", init_transfer(w, g, rng, dtype))

    @property
    def transfers(self):
        return [getattr(self, f"level{j}") for j in range(len(self.widths) - 1)]

    def encode(self, x):
        for t in self.transfers:
            x = t.restrict(x)
        return x

    def decode(self, z):
        for t in reversed(self.transfers):
            z = t.prolong(z)
        return z

    def forward(self, x):
        return self.decode(self.encode(x))


def build_model(arch, rng=None, dtype=np.float32):
    """Instantiate the network described by ``arch`` (a dict with ``kind``)."""
    arch = dict(arch)
    kind = arch.get("kind")
    params = {k: v for k, v in arch.items() if k != "kind"}
    if kind == "mgic_block":
        config = MgicConfig.from_dict(params)
        model = build_mgic_block(params["c"], config, rng=rng, dtype=dtype,
                                 clamp=params.get("clamp", True))
    elif kind == "template":
        model = BlockTemplate.from_dict(params.get("template", {})).instantiate(
            params["c"], params.get("group_size"), rng=rng, dtype=dtype)
    elif kind == "approx_net":
        model = ApproxNet(rng=rng, dtype=dtype, **params)
    elif kind == "classifier":
        template = params.pop("template", None)
        if template is not None:
            template = BlockTemplate.from_dict(template)
        params["widths"] = tuple(params.get("widths", (32, 64)))
        model = Classifier(template=template, rng=rng, dtype=dtype, **params)
    elif kind == "transfer_chain":
        model = TransferChain(params["c"], params["s_g"], params["s_c"], rng=rng, dtype=dtype)
    else:
        raise ConfigurationError(f"unknown architecture kind {kind!r}")
    model.arch = arch
    return model.assign_names()
