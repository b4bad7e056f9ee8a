"""Finite-difference verification of every registered adjoint.

Each :class:`Case` draws a random 64-bit point and exposes a scalar loss
over its inputs.  The harness checks the adjoint with respect to every
input at several points.  Points where a relu argument falls within
``kink_margin`` of zero are redrawn, since the adjoint is not defined
there.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tape, Tensor, finite_difference_check, parameter_check
from .errors import MgicError

__all__ = ["Case", "CheckResult", "primitive_cases", "mgic_block_case", "check_case", "run_gradcheck"]


@dataclass
class Case:
    """``build(rng)`` returns ``(loss, arrays)``; ``loss(*tensors)`` is scalar."""

    name: str
    build: object
    points: int = 10
    atol: float = 0.0


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool
    message: str = ""
    points: int = 0

    def to_dict(self):
        return {"name": self.name, "max_error": self.max_error, "passed": self.passed,
                "message": self.message, "points": self.points}


def _weighted(rng, shape):
    """Random weighting so a plain sum's symmetric cancellations do not hide errors."""
    w = Tensor(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))
    return lambda y: (y * w).sum()


def _unary(name, op, sample, points=10):
    def build(rng):
        x = sample(rng)
        reduce = _weighted(rng, np.shape(op(Tensor(x)).data))
        return (lambda t: reduce(op(t))), [x]
    return Case(name, build, points)


def _normal(*shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def _binary(name, op, shape_a, shape_b, points=10):
    def build(rng):
        a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
        reduce = _weighted(rng, np.shape(op(Tensor(a), Tensor(b)).data))
        return (lambda x, y: reduce(op(x, y))), [a, b]
    return Case(name, build, points)


def _conv_case(name, x_shape, w_shape, stride, padding, groups, bias):
    def build(rng):
        arrays = [rng.standard_normal(x_shape), rng.standard_normal(w_shape)]
        if bias:
            arrays.append(rng.standard_normal(w_shape[0]))
        probe = ops.conv2d(Tensor(arrays[0]), Tensor(arrays[1]), stride=stride,
                           padding=padding, groups=groups)
        reduce = _weighted(rng, probe.shape)

        def loss(x, w, b=None):
            return reduce(ops.conv2d(x, w, b, stride=stride, padding=padding, groups=groups))
        return loss, arrays
    return Case(name, build)


def _batch_norm_case(name, shape, training):
    c = shape[1]

    def build(rng):
        arrays = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
        mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        reduce = _weighted(rng, shape)

        def loss(x, g, b):
            # fresh buffers each call keep the forward a pure function
            return reduce(ops.batch_norm(x, g, b, mean.copy(), var.copy(), training))
        return loss, arrays
    return Case(name, build)


def _linear_case(bias):
    def build(rng):
        arrays = [rng.standard_normal((4, 5)), rng.standard_normal((3, 5))]
        if bias:
            arrays.append(rng.standard_normal(3))
        reduce = _weighted(rng, (4, 3))
        return (lambda x, w, b=None: reduce(ops.linear(x, w, b))), arrays
    return Case("linear" + ("+bias" if bias else ""), build)


def _mse_case():
    def build(rng):
        return ops.mse_loss, [rng.standard_normal((6,)), rng.standard_normal((6,))]
    return Case("mse_loss", build)


def _cross_entropy_case():
    def build(rng):
        labels = rng.integers(0, 5, size=4)
        return (lambda z: ops.softmax_cross_entropy(z, labels)), [rng.standard_normal((4, 5))]
    return Case("softmax_cross_entropy", build)


def _concat_case():
    def build(rng):
        arrays = [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 1, 2, 2))]
        reduce = _weighted(rng, (2, 4, 2, 2))
        return (lambda a, b: reduce(ag.concat([a, b], axis=1))), arrays
    return Case("concat", build)


def primitive_cases():
    """One case per differentiable primitive (and per conv/norm regime)."""
    return [
        _binary("add", ag.add, (3, 4), (3, 4)),
        _binary("add(broadcast)", ag.add, (3, 4), (4,)),
        _binary("sub", ag.sub, (3, 4), (3, 4)),
        _binary("mul", ag.mul, (3, 4), (3, 1)),
        _unary("reciprocal", ag.reciprocal, _positive(3, 4)),
        _unary("power", lambda t: ag.power(t, 3.0), _normal(3, 4)),
        _unary("exp", ag.exp, _normal(3, 4)),
        _unary("log", ag.log, _positive(3, 4)),
        _unary("relu", ag.relu, _normal(3, 4)),
        _unary("sum", lambda t: ag.tsum(t, axis=1), _normal(3, 4)),
        _unary("mean", lambda t: ag.tmean(t, axis=(0, 2)), _normal(2, 3, 4)),
        _unary("reshape", lambda t: ag.reshape(t, (4, 3)), _normal(3, 4)),
        _unary("transpose", lambda t: ag.transpose(t, (1, 0, 2)), _normal(2, 3, 4)),
        _unary("getitem", lambda t: ag.getitem(t, (slice(None), slice(1, 3))), _normal(3, 4)),
        _binary("matmul", ag.matmul, (3, 4), (4, 2)),
        _concat_case(),
        _conv_case("conv2d", (2, 4, 5, 5), (6, 4, 3, 3), 1, 1, 1, False),
        _conv_case("conv2d(grouped,bias)", (2, 4, 5, 5), (4, 2, 3, 3), 1, 1, 2, True),
        _conv_case("conv2d(depthwise,stride2)", (2, 4, 5, 5), (4, 1, 3, 3), 2, 1, 4, False),
        _conv_case("conv2d(pointwise)", (2, 4, 3, 3), (6, 2, 1, 1), 1, 0, 2, True),
        _batch_norm_case("batch_norm(train)", (4, 3, 2, 2), True),
        _batch_norm_case("batch_norm(train,2d)", (5, 3), True),
        _batch_norm_case("batch_norm(eval)", (4, 3, 2, 2), False),
        _unary("max_pool2d", lambda t: ops.max_pool2d(t, 2), _normal(2, 2, 4, 4)),
        _unary("avg_pool2d", lambda t: ops.avg_pool2d(t, 2), _normal(2, 2, 4, 4)),
        _unary("global_avg_pool", ops.global_avg_pool, _normal(2, 3, 3, 3)),
        _linear_case(False),
        _linear_case(True),
        _mse_case(),
        _cross_entropy_case(),
    ]


def mgic_block_case(c=16, s_g=4, s_c=4, template=None, hw=3, batch=4, points=2, training=True):
    """A freshly built 64-bit MGIC block; checks its input and every parameter.

    In training mode a correction-norm shift followed by another batch norm
    has an identically zero derivative, so coordinates where both sides are
    below 1e-7 are treated as agreeing.
    """
    from .core import BlockTemplate, MgicConfig, build_mgic_block

    template = template or BlockTemplate("simple", d=3)

    def build(rng):
        block = build_mgic_block(c, MgicConfig(s_g, s_c, template), rng=rng, dtype=np.float64)
        if not training:
            _settle_norms(block, rng)
        x = rng.standard_normal((batch, c, hw, hw))
        reduce = _weighted(rng, x.shape)
        return (lambda t: reduce(block(t))), [x], block
    mode = "train" if training else "eval"
    return Case(f"mgic_block(c={c},s_g={s_g},s_c={s_c},{mode})", build, points,
                atol=1e-7 if training else 0.0)


def _settle_norms(block, rng):
    """Give every batch norm non-trivial running statistics, then freeze."""
    for mod in block.modules():
        if hasattr(mod, "running_mean"):
            mod.running_mean[...] = rng.standard_normal(mod.running_mean.shape) * 0.1
            mod.running_var[...] = rng.uniform(0.5, 2.0, mod.running_var.shape)
    block.eval()


def _relu_margin(loss, tensors):
    """Smallest |argument| over relu nodes in one forward pass."""
    with Tape() as tape:
        loss(*tensors)
    margins = [np.min(np.abs(n.inputs[0].data)) for n in tape.nodes if n.op == "relu"]
    return min(margins) if margins else np.inf


def _draw(case, rng, kink_margin, attempts):
    for _ in range(attempts):
        built = case.build(rng)
        loss, arrays = built[0], built[1]
        if _relu_margin(loss, [Tensor(a) for a in arrays]) >= kink_margin:
            return built
    raise MgicError(f"no point at least {kink_margin} away from relu kinks in {attempts} draws")


def check_case(case, seed=0, eps=1e-6, tol=1e-4, kink_margin=1e-3, attempts=50, points=None):
    """Run one case at ``points`` random points; never raises."""
    rng = np.random.default_rng(seed)
    points = case.points if points is None else points
    worst = 0.0
    try:
        for _ in range(points):
            built = _draw(case, rng, kink_margin, attempts)
            loss, arrays = built[0], built[1]
            for i in range(len(arrays)):
                def f(t, i=i):
                    args = [Tensor(a) for a in arrays]
                    args[i] = t
                    return loss(*args)
                worst = max(worst, finite_difference_check(f, arrays[i], eps=eps, atol=case.atol))
            if len(built) > 2:
                tensors = [Tensor(a) for a in arrays]
                errors = parameter_check(lambda: loss(*tensors), built[2].parameters(),
                                         eps=eps, atol=case.atol)
                worst = max([worst, *errors.values()])
    except Exception as exc:  # reported, never thrown
        return CheckResult(case.name, float("nan"), False, f"{type(exc).__name__}: {exc}", points)
    passed = bool(worst < tol)
    message = "" if passed else f"max relative error {worst:.3e} >= {tol:g}"
    return CheckResult(case.name, worst, passed, message, points)


def run_gradcheck(cases=None, seed=0, eps=1e-6, tol=1e-4, include_block=True):
    """Check every primitive (and an MGIC block); returns a list of results."""
    cases = list(primitive_cases() if cases is None else cases)
    if include_block:
        cases += [mgic_block_case(training=True), mgic_block_case(training=False)]
    return [check_case(case, seed=seed + k, eps=eps, tol=tol) for k, case in enumerate(cases)]
