"""Mult-Adds and parameter accounting, checked against instrumented forwards"""

import numpy as np
import pytest

from conftest import random_generator_genome
from cost_model import (
    CostLimit, conv_cost, discriminator_cost, gate, generator_cost, linear_cost, op_cost,
)
from errors import ConfigError, ShapeError
from model_builder import build_discriminator, build_generator, build_op
from search_space import (
    DISCRIMINATOR, OP_KINDS, REDOP_KINDS, decode_discriminator, decode_generator,
    make_genome,
)
from tensorkit import Conv2d, Linear

SKELETON_MADDS = 3_151_872_000
SKELETON_PARAMS = 12_643
CONV3_CHAIN_MADDS = 8_460_288_000
CONV3_CHAIN_PARAMS = 35_843


@pytest.fixture
def multiply_counter(monkeypatch):
    """Counts the multiplies every Conv2d / Linear forward actually performs"""
    counts = []
    conv_forward, linear_forward = Conv2d.forward, Linear.forward

    def counting_conv(self, x):
        out = conv_forward(self, x)
        per_image = out.size // x.shape[0]
        counts.append(per_image * self.kernel * self.kernel * (self.in_channels // self.groups))
        return out

    def counting_linear(self, x):
        out = linear_forward(self, x)
        counts.append(out.size // x.shape[0] * self.in_features)
        return out

    monkeypatch.setattr(Conv2d, "forward", counting_conv)
    monkeypatch.setattr(Linear, "forward", counting_linear)
    return counts


def random_discriminator_genome(rng):
    decisions = []
    for _ in range(5):
        decisions += [int(rng.integers(len(OP_KINDS))), int(rng.integers(len(REDOP_KINDS)))]
    return make_genome(DISCRIMINATOR, decisions)


class TestPrimitives:
    def test_conv_cost(self):
        madds, params, out = conv_cost(3, 16, 16, (10, 12))
        assert madds == 10 * 12 * 9 * 16 * 16
        assert params == 9 * 16 * 16 + 16
        assert out == (10, 12)

    def test_strided_grouped_conv(self):
        madds, params, out = conv_cost(5, 16, 32, (9, 9), groups=4, stride=2)
        assert out == (5, 5)
        assert madds == 25 * 25 * 4 * 32
        assert params == 25 * 4 * 32 + 32

    def test_kernel_wider_than_map(self):
        with pytest.raises(ShapeError):
            conv_cost(7, 16, 16, (5, 5))
        madds, _, _ = conv_cost(7, 16, 16, (5, 5), strict=False)
        assert madds == 25 * 49 * 16 * 16

    def test_linear_cost(self):
        assert linear_cost(16, 4) == (64, 68)

    def test_identity_is_free(self):
        assert op_cost(OP_KINDS[-1], 16, (8, 8)) == (0, 0)

    def test_empty_input_rejected(self):
        with pytest.raises(ShapeError):
            op_cost(OP_KINDS[0], 16, (0, 8))


class TestRegressionConstants:
    def test_skeleton(self, skeleton_genome):
        report = generator_cost(decode_generator(skeleton_genome), n=16, scale=2)
        assert report.mult_adds == SKELETON_MADDS
        assert report.params == SKELETON_PARAMS

    def test_conv3_chain(self, conv3_chain):
        report = generator_cost(decode_generator(conv3_chain), n=16, scale=2)
        assert report.mult_adds == CONV3_CHAIN_MADDS
        assert report.params == CONV3_CHAIN_PARAMS

    def test_breakdown_names(self, conv3_chain):
        names = [item.name for item in generator_cost(decode_generator(conv3_chain), 16, 4).items]
        assert names[0] == "head"
        assert names[1] == "node1:Conv(3)"
        assert names[-4:] == ["post_cell", "upsample1", "upsample2", "tail"]

    def test_scale_four_runs_the_cell_on_fewer_pixels(self, conv3_chain):
        cell = decode_generator(conv3_chain)
        # Same output resolution, but the cell runs on a quarter of the pixels
        assert generator_cost(cell, 16, 4).mult_adds < generator_cost(cell, 16, 2).mult_adds

    def test_unsupported_scale(self, conv3_chain):
        with pytest.raises(ConfigError):
            generator_cost(decode_generator(conv3_chain), 16, 3)


class TestGate:
    def test_boundary_is_inclusive(self, skeleton_genome):
        report = generator_cost(decode_generator(skeleton_genome), 16, 2)
        assert gate(report, CostLimit(SKELETON_MADDS)).passed
        assert not gate(report, CostLimit(SKELETON_MADDS - 1)).passed

    def test_default_limit_rejects_conv3_chain(self, conv3_chain):
        result = gate(generator_cost(decode_generator(conv3_chain), 16, 2), CostLimit(5e9))
        assert not result.passed
        assert result.mult_adds == CONV3_CHAIN_MADDS

    @pytest.mark.parametrize("limit", [0, -1.0])
    def test_limit_must_be_positive(self, limit):
        with pytest.raises(ConfigError):
            CostLimit(limit)


class TestAgainstInstrumentedForward:
    def test_random_ops(self, rng, multiply_counter):
        n = 8
        for _ in range(200):
            op = OP_KINDS[int(rng.integers(len(OP_KINDS)))]
            h, w = int(rng.integers(7, 11)), int(rng.integers(7, 11))
            layer = build_op(op, n, rng)
            multiply_counter.clear()
            layer.forward(rng.standard_normal((1, n, h, w)).astype(np.float32))
            assert sum(multiply_counter) == op_cost(op, n, (h, w))[0], op.label
            assert layer.num_parameters() == op_cost(op, n, (h, w))[1], op.label

    def test_random_reductions(self, rng, multiply_counter):
        n = 8
        for _ in range(50):
            redop = REDOP_KINDS[int(rng.integers(len(REDOP_KINDS)))]
            h, w = int(rng.integers(7, 11)), int(rng.integers(7, 11))
            conv = Conv2d(n, 2 * n, redop.kernel, stride=2, groups=redop.groups, rng=rng)
            multiply_counter.clear()
            conv.forward(rng.standard_normal((2, n, h, w)).astype(np.float32))
            assert sum(multiply_counter) == op_cost(redop, n, (h, w))[0], redop.label

    @pytest.mark.parametrize("scale", [1, 2, 4])
    def test_whole_generator(self, rng, multiply_counter, scale):
        genome = random_generator_genome(rng)
        net = build_generator(genome, n=8, scale=scale)
        multiply_counter.clear()
        net.forward(rng.standard_normal((1, 3, 8, 10)).astype(np.float32))
        report = generator_cost(decode_generator(genome), 8, scale, ref_resolution=(10 * scale, 8 * scale))
        assert sum(multiply_counter) == report.mult_adds

    def test_whole_discriminator(self, rng, multiply_counter):
        genome = random_discriminator_genome(rng)
        net = build_discriminator(genome, n=8, bottleneck=16, patch=32)
        multiply_counter.clear()
        net.forward(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        report = discriminator_cost(decode_discriminator(genome), 8, 16, 32)
        assert sum(multiply_counter) == report.mult_adds


class TestParameterCounts:
    def test_built_generators_match(self, rng):
        for _ in range(50):
            genome = random_generator_genome(rng)
            net = build_generator(genome, n=16, scale=2)
            assert net.num_parameters() == generator_cost(decode_generator(genome), 16, 2).params

    @pytest.mark.parametrize("bottleneck", [0, 32])
    def test_built_discriminators_match(self, rng, bottleneck):
        for _ in range(10):
            genome = random_discriminator_genome(rng)
            net = build_discriminator(genome, n=8, bottleneck=bottleneck, patch=32)
            report = discriminator_cost(decode_discriminator(genome), 8, bottleneck, 32)
            assert net.num_parameters() == report.params

    def test_reduced_space_genomes_cost(self, reduced_space):
        genome = make_genome(reduced_space, [1, 0, 0, 1, 1, 2])
        report = generator_cost(decode_generator(genome), 16, 2)
        assert [item.name for item in report.items][1:4] == ["node1:Conv(3)", "node2:Conv(1)", "node3:Conv(3)"]
