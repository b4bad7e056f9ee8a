"""Parameter, MAC/FLOP and activation-memory accounting.

Counts are obtained by running a forward pass on zeros under a recording
tape and attributing each primitive to the innermost module executing it,
so they always agree with what the network actually computes.

Per-primitive MAC conventions:

* conv2d: ``N * H' * W' * c_out * (c_in / g) * kh * kw`` (bias adds free)
* linear: ``N * c_in * c_out``
* batch_norm: 1 per element (folded scale and shift)
* avg_pool2d: ``k * k`` per output element; global_avg_pool: 1 per input element
* relu, max_pool2d, add, sub and shape ops: 0

FLOPs are reported as ``2 * MACs``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor, no_grad
from .core import MgicBlock, level_widths
from .errors import ConfigurationError, DimensionError
from .nn import BatchNorm2d, track_modules, current_module_stack

__all__ = [
    "CostReport",
    "count_params",
    "closed_form_mgic_params",
    "mgic_param_bound",
    "fully_coupled_params",
    "count_macs",
    "activation_memory",
    "hierarchy_ratio",
]


@dataclass
class CostReport:
    params: int = 0
    macs: int = 0
    peak_train_activation: int = 0
    peak_infer_activation: int = 0
    per_layer: list = field(default_factory=list)

    @property
    def flops(self):
        return 2 * self.macs

    def to_dict(self):
        return {
            "params": self.params,
            "macs": self.macs,
            "flops": self.flops,
            "train_activation": self.peak_train_activation,
            "infer_activation": self.peak_infer_activation,
            "per_layer": self.per_layer,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _is_norm(module):
    return isinstance(module, BatchNorm2d)


def count_params(network, include_norm=True):
    """Total element count of the network's parameters.

    ``include_norm=False`` leaves out batch-norm scale and shift, which is
    the convention of the closed-form formula.
    """
    if network is None:
        return 0
    total = 0
    for _, mod in network.named_modules():
        if not include_norm and _is_norm(mod):
            continue
        total += sum(p.size for p in mod._params.values())
    return int(total)


def closed_form_mgic_params(c, s_g, s_c, d):
    """Convolution weights of an MGIC block with a bias-free d x d template.

    Each grouped level j contributes ``s_g * c_j * d**2`` for its relaxation
    and ``s_g * c_j`` for its transfer pair; the coarsest level adds
    ``c_n**2 * d**2``, where ``c_n == s_c`` whenever ``c / s_c`` is a power
    of two.
    """
    widths = level_widths(c, s_c)
    total = 0
    for j, cj in enumerate(widths[:-1]):
        if s_g % 2 or cj % s_g:
            raise ConfigurationError(f"s_g={s_g} does not evenly divide level {j} width {cj}")
        total += s_g * cj * (d * d + 1)
    return total + widths[-1] ** 2 * d * d


def mgic_param_bound(c, s_g, s_c, d):
    """Upper bound 2 * s_g * c * (d**2 + 1) + s_c**2 * d**2."""
    return 2 * s_g * c * (d * d + 1) + s_c * s_c * d * d


def fully_coupled_params(c, d):
    return c * c * d * d


# -- profiling ---------------------------------------------------------------------


class _ProfileTape(Tape):
    def __init__(self):
        super().__init__()
        self.owners = []

    def record(self, node, out):
        super().record(node, out)
        stack = current_module_stack()
        self.owners.append(stack[-1] if stack else None)


def _op_macs(node, out):
    op = node.op
    if op == "conv2d":
        w = node.inputs[1].shape
        return int(out.size * w[1] * w[2] * w[3])
    if op == "linear":
        return int(out.size * node.inputs[1].shape[1])
    if op == "batch_norm":
        return int(out.size)
    if op == "avg_pool2d":
        return int(out.size * node.attrs["kernel"] ** 2)
    if op == "global_avg_pool":
        return int(node.inputs[0].size)
    return 0


def _profile(model, input_shape):
    params = model.parameters()
    dtype = params[0].dtype if params else np.float64
    modes = {id(m): m.training for m in model.modules()}
    model.eval()
    try:
        x = Tensor(np.zeros(input_shape, dtype=dtype))
        with no_grad(), track_modules(), _ProfileTape() as tape:
            model(x)
    finally:
        for m in model.modules():
            object.__setattr__(m, "training", modes[id(m)])
    return x, tape


def count_macs(model, input_shape):
    """Run ``model`` once on zeros of ``input_shape`` and return a CostReport."""
    names = {id(m): n or "<root>" for n, m in model.named_modules()}
    try:
        x, tape = _profile(model, input_shape)
    except DimensionError as exc:
        raise DimensionError(f"shape propagation failed: {exc}") from exc

    report = CostReport(params=count_params(model))
    seen = set()
    for (node, out), owner in zip(tape.entries, tape.owners):
        macs = _op_macs(node, out)
        report.macs += macs
        name = names.get(id(owner), "<root>") if owner is not None else "<root>"
        params = 0
        if owner is not None and id(owner) not in seen:
            seen.add(id(owner))
            params = sum(p.size for p in owner._params.values())
        report.per_layer.append({
            "layer": name,
            "op": node.op,
            "output_shape": list(out.shape),
            "params": int(params),
            "macs": macs,
        })
    train, infer = _memory_from_tape(x, tape)
    report.peak_train_activation = train
    report.peak_infer_activation = infer
    return report


_VIEWS = {"reshape", "transpose"}


def _memory_from_tape(x, tape):
    """(retained-for-backward elements, peak live elements at inference).

    Training keeps every intermediate map, so its peak is the input plus the
    sum of all outputs.  Inference frees a map right after its last consumer
    runs.
    """
    entries = tape.entries
    train = x.size + sum(out.size for node, out in entries if node.op not in _VIEWS)

    produced = {id(x): (-1, x.size)}
    last_use = {id(x): -1}
    for i, (node, out) in enumerate(entries):
        for t in node.inputs:
            if id(t) in produced:
                last_use[id(t)] = i
        produced[id(out)] = (i, 0 if node.op in _VIEWS else out.size)
        last_use[id(out)] = i
    if entries:
        last_use[id(entries[-1][1])] = len(entries)

    frees = {}
    for key, step in last_use.items():
        frees.setdefault(step, []).append(key)
    live = x.size
    peak = live
    for i, (node, out) in enumerate(entries):
        live += produced[id(out)][1]
        peak = max(peak, live)
        for key in frees.get(i, ()):
            live -= produced[key][1]
    return int(train), int(peak)


def activation_memory(block, input_shape):
    """(train_peak, infer_peak) activation elements for one forward pass."""
    x, tape = _profile(block, input_shape)
    return _memory_from_tape(x, tape)


def hierarchy_ratio(block_or_width, s_c=None):
    """Sum of all level widths over the finest width (< 2 always)."""
    if isinstance(block_or_width, MgicBlock):
        widths = block_or_width.widths
    else:
        widths = level_widths(block_or_width, s_c)
    return sum(widths) / widths[0]
