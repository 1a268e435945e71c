import math

import numpy as np
import pytest

from _blockevo.arch import BlockSpec, SpatialUnderflow, StemSpec, build_network, count_channels
from _blockevo.data import LabeledImageSet, split_train_test
from _blockevo.nn import (
    AdamHyper,
    AdamState,
    BadCheckpoint,
    DenseLayerParams,
    NonFiniteError,
    NonFiniteLoss,
    ShapeMismatch,
    TransitionParams,
    ZeroEpochs,
    adam_step,
    dense_block_forward,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    param_shapes,
    save_checkpoint,
    softmax_cross_entropy,
    train,
    train_and_curve,
    transition_forward,
    zero_params,
)


def random_layers(rng, channels, growth_rates):
    layers = []
    for g in growth_rates:
        layers.append(DenseLayerParams(rng.normal(size=(g, channels, 3, 3)), rng.normal(size=g)))
        channels += g
    return layers


def two_blob_set(per_class=50, seed=0):
    """A wide bright blob against a narrow one, 8x8."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:8, 0:8]
    images = []
    for sigma in (2.5, 0.8):
        bump = np.exp(-((rows - 3.5) ** 2 + (cols - 3.5) ** 2) / (2 * sigma**2))
        images.append(np.clip(bump + rng.normal(0, 0.05, size=(per_class, 1, 8, 8)), 0, 1))
    labels = np.repeat([0, 1], per_class)
    return LabeledImageSet(np.concatenate(images), labels, 2, "two-blobs")


class TestDenseBlock:
    def test_output_channels(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 16, 8, 8))
        out = dense_block_forward(x, random_layers(rng, 16, (5, 5, 5)))
        assert out.shape == (1, 31, 8, 8)

    def test_channels_agree_with_arch(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            growth = tuple(int(g) for g in rng.integers(1, 5, size=rng.integers(1, 4)))
            channels = int(rng.integers(1, 5))
            x = rng.normal(size=(1, channels, 3, 3))
            out = dense_block_forward(x, random_layers(rng, channels, growth))
            assert out.shape[1] == count_channels(BlockSpec(growth), channels)

    def test_zero_weights_append_zeros(self):
        x = np.random.default_rng(2).normal(size=(2, 4, 5, 5))
        layers = [DenseLayerParams(np.zeros((3, 4, 3, 3)), np.zeros(3))]
        out = dense_block_forward(x, layers)
        np.testing.assert_array_equal(out[:, :4], x)
        np.testing.assert_array_equal(out[:, 4:], 0.0)

    def test_wrong_kernel_width(self):
        x = np.zeros((1, 4, 5, 5))
        with pytest.raises(ShapeMismatch):
            dense_block_forward(x, [DenseLayerParams(np.zeros((3, 5, 3, 3)), np.zeros(3))])


class TestTransition:
    def identity(self, channels):
        return TransitionParams(np.eye(channels).reshape(channels, channels, 1, 1), np.zeros(channels))

    def test_constant_input(self):
        out = transition_forward(np.full((1, 4, 8, 8), 0.3), self.identity(4))
        assert out.shape == (1, 4, 4, 4)
        np.testing.assert_allclose(out, 0.3)

    def test_two_by_two_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
        np.testing.assert_allclose(transition_forward(x, self.identity(1)), [[[[2.5]]]])

    def test_one_by_one_underflows(self):
        with pytest.raises(SpatialUnderflow):
            transition_forward(np.zeros((1, 2, 1, 1)), self.identity(2))


class TestNetwork:
    @pytest.mark.parametrize("num_classes", [2, 3, 10])
    def test_zero_params_give_uniform_loss(self, num_classes):
        spec = build_network(BlockSpec((2, 3)), 1, 2, (1, 8, 8), num_classes)
        x = np.random.default_rng(0).uniform(size=(4, 1, 8, 8))
        loss, _ = loss_and_grad(spec, zero_params(spec), x, np.arange(4) % num_classes)
        assert abs(loss - math.log(num_classes)) <= 1e-10

    def test_input_shape_checked(self):
        spec = build_network(BlockSpec((2,)), 1, 1, (1, 8, 8), 2)
        with pytest.raises(ShapeMismatch):
            forward(spec, zero_params(spec), np.zeros((1, 1, 6, 6)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            growth = tuple(int(g) for g in rng.integers(1, 4, size=rng.integers(1, 3)))
            size = int(rng.integers(2, 9))
            spec = build_network(
                BlockSpec(growth),
                1,
                int(rng.integers(1, 3)),
                (int(rng.integers(1, 3)), size, size),
                3,
                StemSpec(out_channels=3),
            )
            params = init_params(spec, rng)
            x = rng.normal(size=(2, *spec.input_shape))
            labels = rng.integers(0, 3, size=2)
            _, grads = loss_and_grad(spec, params, x, labels)

            h = 1e-5
            for name, p in params.items():
                numeric = np.zeros_like(p)
                for index in np.ndindex(p.shape):
                    original = p[index]
                    p[index] = original + h
                    plus, _ = loss_and_grad(spec, params, x, labels)
                    p[index] = original - h
                    minus, _ = loss_and_grad(spec, params, x, labels)
                    p[index] = original
                    numeric[index] = (plus - minus) / (2 * h)
                np.testing.assert_allclose(grads[name], numeric, rtol=1e-4, atol=1e-7, err_msg=f"trial {trial}, {name}")

    def test_batch_order_does_not_change_mean_loss(self):
        rng = np.random.default_rng(5)
        spec = build_network(BlockSpec((2, 3)), 1, 2, (1, 8, 8), 4, StemSpec(out_channels=4))
        params = init_params(spec, rng)
        x = rng.uniform(size=(6, 1, 8, 8))
        labels = rng.integers(0, 4, size=6)
        order = rng.permutation(6)

        losses, _ = softmax_cross_entropy(forward(spec, params, x), labels)
        permuted, _ = softmax_cross_entropy(forward(spec, params, x[order]), labels[order])
        np.testing.assert_allclose(permuted, losses[order], rtol=1e-12)

        mean, _ = loss_and_grad(spec, params, x, labels)
        mean_permuted, _ = loss_and_grad(spec, params, x[order], labels[order])
        assert mean_permuted == pytest.approx(mean, rel=1e-12)

    def test_adam_step_lowers_the_loss(self):
        rng = np.random.default_rng(6)
        spec = build_network(BlockSpec((3,)), 1, 1, (1, 6, 6), 3, StemSpec(out_channels=4))
        params = init_params(spec, rng)
        x = rng.uniform(size=(8, 1, 6, 6))
        labels = rng.integers(0, 3, size=8)
        before, grads = loss_and_grad(spec, params, x, labels)
        stepped, _ = adam_step(params, grads, AdamState(AdamHyper(lr=1e-4)))
        after, _ = loss_and_grad(spec, stepped, x, labels)
        assert after < before

    def test_non_finite_input(self):
        spec = build_network(BlockSpec((2,)), 1, 1, (1, 4, 4), 2)
        x = np.zeros((2, 1, 4, 4))
        x[1, 0, 2, 2] = np.nan
        with pytest.raises(NonFiniteError):
            loss_and_grad(spec, init_params(spec, np.random.default_rng(0)), x, np.array([0, 1]))

    def test_param_names_follow_traversal(self):
        spec = build_network(BlockSpec((2,)), 1, 2, (1, 8, 8), 2)
        assert list(param_shapes(spec)) == [
            "stem.weight",
            "stem.bias",
            "block0.layer0.weight",
            "block0.layer0.bias",
            "transition0.weight",
            "transition0.bias",
            "block1.layer0.weight",
            "block1.layer0.bias",
            "head.weight",
            "head.bias",
        ]


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([3.0, -0.4, 100.0])}
        hyper = AdamHyper(lr=0.01)
        updated, state = adam_step(params, grads, AdamState(hyper))
        np.testing.assert_allclose(updated["w"] - params["w"], -0.01 * np.sign(grads["w"]), rtol=1e-6)
        assert state.t == 1

    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.array([1.0, 2.0])}
        state = AdamState(AdamHyper())
        for _ in range(10):
            params, state = adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])

    def test_zero_learning_rate(self):
        params = {"w": np.array([1.0, 2.0])}
        updated, state = adam_step(params, {"w": np.array([0.5, -0.5])}, AdamState(AdamHyper(lr=0.0)))
        np.testing.assert_array_equal(updated["w"], params["w"])
        assert np.all(state.m["w"] != 0.0) and np.all(state.v["w"] > 0.0)

    def test_state_is_not_mutated(self):
        state = AdamState(AdamHyper())
        adam_step({"w": np.ones(2)}, {"w": np.ones(2)}, state)
        assert state.t == 0 and state.m == {}


class TestTraining:
    def setup_method(self):
        self.train_set, self.test_set = split_train_test(two_blob_set(), 0.8, seed=0)
        self.spec = build_network(BlockSpec((4,)), 1, 1, (1, 8, 8), 2, StemSpec(out_channels=4))

    def test_curve_length(self):
        curve = train_and_curve(self.spec, self.train_set, self.test_set, 3, batch_size=16)
        assert curve.epochs == 3
        assert curve.best_accuracy == max(curve.accuracies)

    def test_zero_epochs(self):
        with pytest.raises(ZeroEpochs):
            train_and_curve(self.spec, self.train_set, self.test_set, 0)

    def test_same_seed_same_curve(self):
        a = train_and_curve(self.spec, self.train_set, self.test_set, 2, seed=7)
        b = train_and_curve(self.spec, self.train_set, self.test_set, 2, seed=7)
        assert a == b

    def test_infinite_learning_rate_trips(self):
        with pytest.raises(NonFiniteLoss) as e:
            train_and_curve(self.spec, self.train_set, self.test_set, 2, hyper=AdamHyper(lr=math.inf), batch_size=8)
        assert e.value.epoch == 0

    def test_learns_separable_blobs(self):
        curve = train_and_curve(self.spec, self.train_set, self.test_set, 20, hyper=AdamHyper(lr=0.01), seed=0)
        assert curve.best_accuracy >= 0.95


class TestCheckpoint:
    def setup_method(self):
        self.spec = build_network(BlockSpec((2, 3)), 2, 2, (1, 8, 8), 3)
        self.params = init_params(self.spec, np.random.default_rng(0))

    def test_round_trip(self, tmp_path):
        save_checkpoint(self.params, tmp_path / "model.bevo")
        loaded = load_checkpoint(tmp_path / "model.bevo", self.spec)
        assert list(loaded) == list(self.params)
        for name in self.params:
            np.testing.assert_array_equal(loaded[name], self.params[name])

    def test_header(self, tmp_path):
        save_checkpoint(self.params, tmp_path / "model.bevo")
        data = (tmp_path / "model.bevo").read_bytes()
        assert data[:4] == b"BEVO"
        assert len(data) == 16 + 8 * sum(p.size for p in self.params.values())

    def test_bad_magic(self, tmp_path):
        save_checkpoint(self.params, tmp_path / "model.bevo")
        data = bytearray((tmp_path / "model.bevo").read_bytes())
        data[:4] = b"NOPE"
        (tmp_path / "bad.bevo").write_bytes(bytes(data))
        with pytest.raises(BadCheckpoint):
            load_checkpoint(tmp_path / "bad.bevo", self.spec)

    def test_truncated(self, tmp_path):
        save_checkpoint(self.params, tmp_path / "model.bevo")
        data = (tmp_path / "model.bevo").read_bytes()
        (tmp_path / "short.bevo").write_bytes(data[:-8])
        with pytest.raises(BadCheckpoint):
            load_checkpoint(tmp_path / "short.bevo", self.spec)

    def test_other_network(self, tmp_path):
        save_checkpoint(self.params, tmp_path / "model.bevo")
        other = build_network(BlockSpec((2,)), 1, 1, (1, 8, 8), 3)
        with pytest.raises(BadCheckpoint):
            load_checkpoint(tmp_path / "model.bevo", other)

    def test_train_returns_final_params(self, tmp_path):
        train_set, test_set = split_train_test(two_blob_set(10), 0.8, seed=1)
        spec = build_network(BlockSpec((2,)), 1, 1, (1, 8, 8), 2)
        _, params = train(spec, train_set, test_set, 1)
        save_checkpoint(params, tmp_path / "trained.bevo")
        assert set(load_checkpoint(tmp_path / "trained.bevo", spec)) == set(param_shapes(spec))
