import math

import numpy as np
import pytest

from dralign import autodiff as ad
from dralign.autodiff import Tape, finite_difference, gradient
from dralign.network import (EPS, MlpParams, MlpSpec, batch_classification_loss, bind, cross_entropy,
                             cross_entropy_node, forward, init, predict, zero_weight)

from conftest import random_batch, random_net, rel_err


def _one_one(w: float, b: float = 0.0) -> MlpParams:
    return MlpParams(MlpSpec(1), np.array([w]), [np.array([b])])


class TestSpec:
    def test_adult_sized_layout(self):
        params = init(MlpSpec(13, (200, 200)), 0)
        assert params.weights.size == 13 * 200 + 200 * 200 + 200 == 42800
        assert [len(K) for K in params.layer_index_sets] == [2600, 40000, 200]

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            MlpSpec(0)
        with pytest.raises(ValueError):
            MlpSpec(3, (4, 0))

    def test_locate_round_trip(self):
        params = init(MlpSpec(3, (4, 2)), 1)
        for k in range(params.weights.size):
            layer, row, col = params.locate(k)
            assert params.layer_weight(layer)[row, col] == params.weights[k]
        with pytest.raises(IndexError):
            params.locate(params.weights.size)


class TestInit:
    def test_deterministic(self):
        a, b = init(MlpSpec(5, (7,)), 3), init(MlpSpec(5, (7,)), 3)
        assert np.array_equal(a.flat(), b.flat())

    def test_glorot_bounds_and_zero_bias(self):
        params = init(MlpSpec(10, (30,)), 0)
        for layer, (fi, fo) in enumerate(params.spec.layer_shapes):
            assert np.abs(params.layer_weight(layer)).max() <= math.sqrt(6 / (fi + fo))
        assert all(not b.any() for b in params.biases)


class TestForward:
    def test_zero_net_is_half(self):
        params = init(MlpSpec(3, (5,)), 0)
        params.weights[:] = 0.0
        X = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(forward(params, X, Tape()).value, np.full(4, 0.5))

    def test_linear_examples(self):
        assert float(forward(_one_one(1.0), np.array([0.0]), Tape()).value) == 0.5
        assert float(forward(_one_one(2.0), np.array([1.0]), Tape()).value) == pytest.approx(0.8808, abs=1e-4)

    def test_output_strictly_inside_unit_interval(self):
        params = random_net(0, (3, 8, 1), scale=50.0)
        X = np.random.default_rng(1).normal(size=(200, 3))
        p = forward(params, X, Tape()).value
        # saturated sigmoids may round to 0/1 in double precision; the loss clamps them
        assert np.all((p >= 0) & (p <= 1))
        assert np.all((predict(random_net(0), X[:, :2]) > 0) & (predict(random_net(0), X[:, :2]) < 1))

    def test_tape_matches_numpy(self):
        params = random_net(4, (3, 6, 5, 1))
        X = np.random.default_rng(2).normal(size=(30, 3))
        np.testing.assert_allclose(forward(params, X, Tape()).value, predict(params, X), rtol=1e-14)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            forward(random_net(0), np.zeros((2, 5)), Tape())


class TestZeroWeight:
    def test_definition_locality_idempotence(self):
        params = random_net(2, (3, 4, 1))
        once = zero_weight(params, 5)
        assert once.weights[5] == 0.0 and params.weights[5] != 0.0
        mask = np.arange(params.weights.size) != 5
        assert np.array_equal(once.weights[mask], params.weights[mask])
        assert np.array_equal(zero_weight(once, 5).flat(), once.flat())

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            zero_weight(random_net(0), 100)

    def test_forward_equals_constructed(self):
        params = random_net(3, (2, 4, 1))
        k = 9
        manual = params.copy()
        manual.weights = manual.weights.copy()
        manual.weights[k] = 0.0
        X = np.random.default_rng(0).normal(size=(10, 2))
        assert np.array_equal(predict(zero_weight(params, k), X), predict(MlpParams(params.spec, manual.weights, manual.biases), X))


class TestLoss:
    def test_perfect_prediction(self):
        t = Tape()
        loss = cross_entropy_node(t.constant(np.array([1.0, 0.0])), [1, 0])
        assert float(loss.value) == pytest.approx(-math.log(1 - EPS), rel=1e-6)
        assert float(loss.value) == pytest.approx(1e-7, rel=1e-6)

    def test_uniform_predictor(self):
        t = Tape()
        assert float(cross_entropy_node(t.constant(np.full(4, 0.5)), [0, 1, 1, 0]).value) == pytest.approx(math.log(2))

    def test_single_sample(self):
        t = Tape()
        assert float(cross_entropy_node(t.constant(np.array([0.8])), [1]).value) == pytest.approx(-math.log(0.8))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch_classification_loss(random_net(0), np.zeros((0, 2)), [], Tape())

    def test_numpy_and_tape_agree(self):
        params = random_net(5)
        X, y = random_batch(np.random.default_rng(0), 25)
        tape_loss = float(batch_classification_loss(params, X, y, Tape()).value)
        assert tape_loss == pytest.approx(cross_entropy(predict(params, X), y), rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        params = random_net(seed)
        X, y = random_batch(np.random.default_rng(seed), 16)
        t = Tape()
        bound = bind(params, t)
        grads = gradient(t, batch_classification_loss(bound, X, y), bound.nodes)
        analytic = np.concatenate([g.value.reshape(-1) for g in grads])
        fd = finite_difference(
            lambda flat: cross_entropy(predict(params.with_flat(flat), X), y), params.flat())
        assert rel_err(analytic, fd) < 1e-4


class TestSerialization:
    def test_json_round_trip_exact(self, tmp_path):
        params = random_net(9, (3, 5, 1))
        params.save(tmp_path / "m.json")
        back = MlpParams.load(tmp_path / "m.json")
        assert back.spec == params.spec and back.seed == params.seed
        assert np.array_equal(back.flat(), params.flat())
