import numpy as np
import pytest

from mgic.autograd import Parameter
from mgic.data import DatasetHandle
from mgic.errors import ConfigurationError, DivergenceError
from mgic.models import build_model
from mgic.nn import Linear, Module
from mgic.ops import mse_loss
from mgic.train import (
    SgdConfig,
    batches,
    lr_at,
    seed_streams,
    sgd_step,
    train_loop,
)


def _param(value):
    p = Parameter(np.array([value], dtype=np.float64), decay=True)
    return p


def test_vanilla_step():
    p = _param(1.0)
    p.grad = np.array([0.5])
    sgd_step([p], {}, SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.95])


def test_momentum_two_steps():
    p, state = _param(0.0), {}
    config = SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
    expected = [(1.0, -0.1), (1.9, -0.29)]
    for v, w in expected:
        p.grad = np.array([1.0])
        sgd_step([p], state, config)
        np.testing.assert_allclose(state[id(p)], [v])
        np.testing.assert_allclose(p.data, [w])


def test_decay_only_step():
    p = _param(1.0)
    p.grad = np.array([0.0])
    sgd_step([p], {}, SgdConfig(lr=0.1, momentum=0.0, weight_decay=1e-4))
    np.testing.assert_allclose(p.data, [0.99999], rtol=1e-12)


def test_decay_skips_unflagged_parameters():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.0])
    sgd_step([p], {}, SgdConfig(lr=0.1, momentum=0.0, weight_decay=1e-4))
    assert p.data[0] == 1.0


def test_non_finite_gradient_names_parameter():
    p = _param(1.0)
    p.name = "layer/weight"
    p.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="layer/weight") as info:
        sgd_step([p], {}, SgdConfig())
    assert info.value.parameter == "layer/weight"


def test_sgd_descends_convex_quadratic():
    # loss = 0.5 * L * w^2 with curvature L = 4; any lr < 2 / L descends
    p, config = _param(3.0), SgdConfig(lr=0.4, momentum=0.0, weight_decay=0.0)
    losses = []
    for _ in range(20):
        p.grad = 4.0 * p.data
        losses.append(2.0 * float(p.data[0]) ** 2)
        sgd_step([p], {}, config)
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("lr0,epoch,expected", [(0.1, 0, 0.1), (0.1, 30, 0.01), (0.1, 65, 0.001),
                                                (0.001, 29, 0.001)])
def test_step_schedule(lr0, epoch, expected):
    assert lr_at(epoch, SgdConfig(lr=lr0, schedule="step")) == pytest.approx(expected, rel=1e-12)


def test_constant_schedule():
    config = SgdConfig(lr=1e-4)
    assert all(lr_at(e, config) == 1e-4 for e in (0, 30, 999))


def test_step_schedule_non_increasing():
    config = SgdConfig(lr=0.1, schedule="step")
    rates = [lr_at(e, config) for e in range(200)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("kwargs", [{"lr": -1.0}, {"momentum": 1.0}, {"schedule": "cosine"},
                                    {"batch_size": 0}, {"weight_decay": -1e-3}])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        SgdConfig(**kwargs)


def test_batches_are_a_permutation():
    rng = np.random.default_rng(0)
    for n, b in [(10, 3), (129, 128), (7, 7), (1, 4)]:
        chunks = batches(n, b, rng)
        np.testing.assert_array_equal(np.sort(np.concatenate(chunks)), np.arange(n))
        assert all(len(c) > 1 for c in chunks) or n == 1


def test_seed_streams_are_independent_and_reproducible():
    a, b = seed_streams(7), seed_streams(7)
    draws = [g.integers(0, 2**62, 4) for g in a]
    for g, d in zip(b, draws):
        np.testing.assert_array_equal(g.integers(0, 2**62, 4), d)
    assert not np.array_equal(draws[0], draws[1])


class _Affine(Module):
    def __init__(self, rng):
        super().__init__()
        self.fc = Linear(3, 1, rng=rng, dtype=np.float64)

    def forward(self, x):
        return self.fc(x).reshape(-1)


def _linear_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    return DatasetHandle("function-surface", x, x @ np.array([1.0, -2.0, 0.5]) + 0.3)


def _mse(out, targets):
    from mgic.autograd import Tensor
    return mse_loss(out, Tensor(targets))


def test_linear_regression_descends_monotonically():
    model = _Affine(np.random.default_rng(1))
    config = SgdConfig(lr=0.01, momentum=0.0, weight_decay=0.0, epochs=5, batch_size=64)
    history = train_loop(model, _linear_data(), config, _mse)
    losses = [row["eval_metric"] for row in history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_zero_learning_rate_leaves_parameters_unchanged():
    model = build_model({"kind": "approx_net", "alpha": 0.2, "s_g": 4, "s_c": 4},
                        rng=np.random.default_rng(2))
    before = {k: v.copy() for k, v in model.state_dict().items() if "running" not in k}
    data = DatasetHandle("function-surface", np.random.default_rng(3).uniform(size=(40, 2, 1, 1)).astype(np.float32),
                         np.zeros(40, dtype=np.float32))
    from mgic.train import mse_first_component
    train_loop(model, data, SgdConfig(lr=0.0, epochs=2, batch_size=16), mse_first_component)
    after = model.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v)


def test_seeded_rerun_is_bit_identical():
    def run():
        model = _Affine(np.random.default_rng(4))
        config = SgdConfig(lr=0.05, momentum=0.9, epochs=3, batch_size=10, seed=5)
        return train_loop(model, _linear_data(50), config, _mse)

    assert run() == run()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good_epoch():
    model = _Affine(np.random.default_rng(6))
    config = SgdConfig(lr=1e3, momentum=0.9, weight_decay=0.0, epochs=50, batch_size=8)
    with pytest.raises(DivergenceError) as info:
        train_loop(model, _linear_data(64), config, _mse)
    assert info.value.last_good_epoch is not None
