"""Layer gradients against finite differences (float64), optimizer and snapshots"""

import numpy as np
import pytest

from errors import CheckpointError, ParseError, ShapeError, ShapeMismatch, StateError
from model_builder import build_discriminator, build_generator
from search_space import DISCRIMINATOR, GENERATOR, make_genome
from tensorkit import (
    Adam, AdamState, BatchNorm2d, CABlock, Conv2d, GlobalAvgPool, Linear, PixelShuffle, PReLU,
    SEBlock, Sequential, Sigmoid, SpectralNorm, adam_step, dsep_conv, inverted_bottleneck,
    load_snapshot, save_snapshot, sigmoid,
)

EPS = 1e-6


def gradcheck(layer, x, rng, samples=8, rtol=1e-5, atol=1e-7):
    """Compare backward() with central differences of sum(forward(x) * direction)"""
    layer.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    direction = rng.standard_normal(layer.forward(x).shape)
    layer.zero_grad()
    dx = layer.backward(direction)
    analytic = {name: p.grad.copy() for name, p in layer.named_parameters()}

    def loss():
        return float((layer.forward(x) * direction).sum())

    def numeric(array, index):
        original = array[index]
        array[index] = original + EPS
        up = loss()
        array[index] = original - EPS
        down = loss()
        array[index] = original
        return (up - down) / (2 * EPS)

    for _ in range(samples):
        index = tuple(int(rng.integers(s)) for s in x.shape)
        assert dx[index] == pytest.approx(numeric(x, index), rel=rtol, abs=atol), f"input{index}"
    for name, p in layer.named_parameters():
        for _ in range(min(samples, p.value.size)):
            index = tuple(int(rng.integers(s)) for s in p.value.shape)
            assert analytic[name][index] == pytest.approx(numeric(p.value, index), rel=rtol, abs=atol), \
                f"{name}{index}"


def images(rng, n=2, c=4, h=6, w=5):
    return rng.standard_normal((n, c, h, w))


class TestGradients:
    @pytest.mark.parametrize("kernel, stride, groups", [(1, 1, 1), (3, 1, 1), (5, 2, 1), (3, 1, 4), (3, 2, 2)])
    def test_conv2d(self, rng, kernel, stride, groups):
        gradcheck(Conv2d(4, 8, kernel, stride=stride, groups=groups, rng=rng), images(rng), rng)

    def test_linear(self, rng):
        gradcheck(Linear(7, 3, rng=rng), rng.standard_normal((4, 7)), rng)

    def test_prelu(self, rng):
        gradcheck(PReLU(4), images(rng), rng)

    def test_sigmoid_and_pool(self, rng):
        gradcheck(Sequential(("pool", GlobalAvgPool()), ("sigmoid", Sigmoid())), images(rng), rng)

    def test_batchnorm_training(self, rng):
        bn = BatchNorm2d(4)
        bn.gamma.value = rng.uniform(0.5, 1.5, 4).astype(np.float32)
        gradcheck(bn, images(rng, n=3), rng)

    def test_batchnorm_eval(self, rng):
        bn = BatchNorm2d(4)
        bn.forward(images(rng).astype(np.float32))
        gradcheck(bn.eval(), images(rng), rng)

    def test_pixel_shuffle(self, rng):
        gradcheck(PixelShuffle(2), images(rng, c=8), rng)

    @pytest.mark.parametrize("block", [SEBlock, CABlock])
    def test_attention_blocks(self, rng, block):
        gradcheck(block(8, rng=rng), images(rng, c=8), rng)

    def test_dsep(self, rng):
        gradcheck(dsep_conv(4, 4, 3, rng=rng), images(rng), rng)

    def test_inverted_bottleneck(self, rng):
        gradcheck(inverted_bottleneck(4, 4, 5, expansion=2, rng=rng), images(rng, h=7, w=7), rng)

    def test_spectral_norm_eval(self, rng):
        layer = SpectralNorm(Conv2d(4, 6, 3, rng=rng), rng=rng)
        layer.forward(images(rng).astype(np.float32))
        gradcheck(layer.eval(), images(rng), rng)

    def test_generator(self, rng):
        decisions = [1, 0, 13, 1, 10, 1, 14, 0]       # several leaves, so the output is a sum
        net = build_generator(make_genome(GENERATOR, decisions + [15, 0] * 6), n=4, scale=2)
        gradcheck(net, rng.standard_normal((1, 3, 5, 6)), rng, samples=4)

    def test_discriminator_eval(self, rng):
        net = build_discriminator(make_genome(DISCRIMINATOR, [1, 0, 11, 4, 14, 1, 4, 2, 8, 3]),
                                  n=4, bottleneck=8, patch=32)
        net.forward(rng.standard_normal((4, 3, 32, 32)).astype(np.float32))
        gradcheck(net.eval(), rng.standard_normal((2, 3, 32, 32)), rng, samples=4)


def _fitted_batchnorm(rng):
    bn = BatchNorm2d(4)
    bn.gamma.value = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    return bn


def _eval_spectral_norm(rng):
    layer = SpectralNorm(Conv2d(4, 6, 3, rng=rng), rng=rng)
    layer.forward(images(rng).astype(np.float32))
    return layer.eval()


LAYER_CASES = {
    "conv1": lambda rng: (Conv2d(4, 8, 1, rng=rng), images(rng)),
    "conv3_stride2": lambda rng: (Conv2d(4, 8, 3, stride=2, rng=rng), images(rng)),
    "gconv5": lambda rng: (Conv2d(4, 8, 5, groups=4, rng=rng), images(rng)),
    "linear": lambda rng: (Linear(7, 3, rng=rng), rng.standard_normal((4, 7))),
    "prelu": lambda rng: (PReLU(4), images(rng)),
    "pool_sigmoid": lambda rng: (Sequential(("pool", GlobalAvgPool()), ("sigmoid", Sigmoid())), images(rng)),
    "batchnorm": lambda rng: (_fitted_batchnorm(rng), images(rng, n=3)),
    "pixel_shuffle": lambda rng: (PixelShuffle(2), images(rng, c=8)),
    "se": lambda rng: (SEBlock(8, rng=rng), images(rng, c=8)),
    "ca": lambda rng: (CABlock(8, rng=rng), images(rng, c=8)),
    "dsep": lambda rng: (dsep_conv(4, 4, 3, rng=rng), images(rng)),
    "inverted_bottleneck": lambda rng: (inverted_bottleneck(4, 4, 5, expansion=2, rng=rng), images(rng, h=7, w=7)),
    "spectral_norm": lambda rng: (_eval_spectral_norm(rng), images(rng)),
}


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_gradients_hold_across_seeds(case, seed):
    rng = np.random.default_rng(seed)
    layer, x = LAYER_CASES[case](rng)
    gradcheck(layer, x, rng, samples=4)


class TestLayerBehaviour:
    def test_dtype_is_preserved(self, rng):
        conv = Conv2d(4, 4, 3, rng=rng)
        assert conv.forward(images(rng).astype(np.float32)).dtype == np.float32
        assert conv.astype(np.float64).forward(images(rng)).dtype == np.float64

    def test_backward_before_forward(self, rng):
        with pytest.raises(StateError):
            Conv2d(4, 4, 3, rng=rng).backward(np.zeros((1, 4, 2, 2)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            Conv2d(4, 4, 3, rng=rng).forward(np.zeros((1, 3, 5, 5)))

    def test_groups_must_divide(self, rng):
        with pytest.raises(ShapeError):
            Conv2d(6, 8, 3, groups=4, rng=rng)

    def test_pixel_shuffle_layout(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 2, 2)
        y = PixelShuffle(2).forward(x)
        assert y.shape == (1, 1, 4, 4)
        # Channel c*r*r + i*r + j lands at (r*h + i, r*w + j)
        assert y[0, 0, 0, 1] == x[0, 1, 0, 0]
        assert y[0, 0, 1, 0] == x[0, 2, 0, 0]
        assert y[0, 0, 3, 3] == x[0, 3, 1, 1]

    def test_sigmoid_is_stable(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_batchnorm_running_stats(self, rng):
        bn = BatchNorm2d(4)
        x = (images(rng, n=4) * 2 + 3).astype(np.float32)
        bn.forward(x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        bn.eval()
        before = bn.running_mean.copy()
        out = bn.forward(x)
        np.testing.assert_array_equal(bn.running_mean, before)
        expected = (x - before.reshape(1, -1, 1, 1)) / np.sqrt(bn.running_var.reshape(1, -1, 1, 1) + bn.eps)
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


class TestSpectralNorm:
    def test_power_iteration_converges_to_unit_norm(self, rng):
        layer = SpectralNorm(Linear(12, 9, rng=rng), rng=rng).astype(np.float64)
        x = rng.standard_normal((2, 12))
        for _ in range(100):
            layer.forward(x)
        sigma = np.linalg.svd(layer.inner.weight_override, compute_uv=False)[0]
        assert sigma == pytest.approx(1.0, rel=1e-3)

    def test_eval_freezes_the_power_state(self, rng):
        layer = SpectralNorm(Conv2d(4, 4, 3, rng=rng), rng=rng)
        x = images(rng).astype(np.float32)
        layer.forward(x)
        u = layer.power.u.copy()
        layer.eval().forward(x)
        np.testing.assert_array_equal(layer.power.u, u)
        layer.train().forward(x)
        assert not np.array_equal(layer.power.u, u)

    def test_power_vectors_are_buffers(self, rng):
        layer = Sequential(("sn", SpectralNorm(Linear(3, 2, rng=rng), rng=rng)))
        state = layer.state_dict()
        assert {"sn.u", "sn.v", "sn.inner.weight", "sn.inner.bias"} == set(state)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = [np.array([1.0, -2.0, 0.5])]
        grads = [np.array([0.3, -4.0, 1e-3])]
        state = AdamState.zeros_like(params)
        (updated,) = adam_step(params, grads, state, lr=0.1)
        np.testing.assert_allclose(updated, [0.9, -1.9, 0.4], rtol=1e-4)
        assert state.step == 1

    def test_minimizes_a_quadratic(self, rng):
        layer = Linear(3, 1, bias=False, rng=rng).astype(np.float64)
        target = np.array([[0.5, -1.0, 2.0]])
        optimizer = Adam(layer.parameters(), lr=0.01)
        for _ in range(1000):
            optimizer.zero_grad()
            layer.weight.grad += 2 * (layer.weight.value - target)
            optimizer.step()
        np.testing.assert_allclose(layer.weight.value, target, atol=1e-2)

    def test_shape_mismatch(self):
        state = AdamState.zeros_like([np.zeros(3)])
        with pytest.raises(ShapeMismatch):
            adam_step([np.zeros(3)], [np.zeros(4)], state, lr=0.1)


class TestStateAndSnapshots:
    def test_state_dict_roundtrip(self, rng, tmp_path):
        source = Sequential(("conv", Conv2d(3, 4, 3, rng=rng)), ("bn", BatchNorm2d(4)))
        source.forward(images(rng, c=3).astype(np.float32))
        save_snapshot(tmp_path / "net", source.state_dict(), {"note": "bn"})

        target = Sequential(("conv", Conv2d(3, 4, 3, rng=np.random.default_rng(9))), ("bn", BatchNorm2d(4)))
        tensors, meta = load_snapshot(tmp_path / "net")
        target.load_state_dict(tensors)
        assert meta == {"note": "bn"}
        for name, value in source.state_dict().items():
            np.testing.assert_array_equal(target.state_dict()[name], value)

    def test_strict_load_reports_missing(self, rng):
        net = Sequential(("conv", Conv2d(3, 4, 3, rng=rng)))
        with pytest.raises(ShapeMismatch):
            net.load_state_dict({"conv.weight": np.zeros((4, 3, 3, 3))})
        net.load_state_dict({"conv.weight": np.zeros((4, 3, 3, 3))}, strict=False)
        assert not net.state_dict()["conv.weight"].any()

    def test_shape_mismatch_even_when_lenient(self, rng):
        net = Sequential(("conv", Conv2d(3, 4, 3, rng=rng)))
        with pytest.raises(ShapeMismatch):
            net.load_state_dict({"conv.weight": np.zeros((4, 3, 1, 1))}, strict=False)

    def test_unexpected_tensor(self, rng):
        net = Sequential(("conv", Conv2d(3, 4, 3, rng=rng)))
        state = {**net.state_dict(), "conv.extra": np.zeros(1)}
        with pytest.raises(ShapeMismatch):
            net.load_state_dict(state)

    def test_missing_snapshot(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_snapshot(tmp_path / "absent")

    def test_unwritable_directory(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(CheckpointError):
            save_snapshot(tmp_path / "file" / "sub" / "net", {"w": np.zeros(2)})

    def test_future_format(self, tmp_path):
        save_snapshot(tmp_path / "s", {"w": np.zeros(2)})
        manifest = (tmp_path / "s.json").read_text().replace('"format": 1', '"format": 7')
        (tmp_path / "s.json").write_text(manifest)
        with pytest.raises(ParseError):
            load_snapshot(tmp_path / "s")
