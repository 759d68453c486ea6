import logging
from unittest import TestCase, main

import numpy as np
from scipy import signal

import sepprune.core.functional as F
from sepprune.core.autodiff import Tape, TensorNode, gradient_check
from sepprune.core.errors import InvalidArgumentError

TOLERANCE = 1e-5


class TestBroadcasting(TestCase):
    def test_per_channel_vector(self):
        x = np.ones((2, 3, 4))
        out = F.mul(x, np.array([1.0, 2.0, 3.0]))
        self.assertEqual(out.shape, (2, 3, 4))
        np.testing.assert_allclose(out.values[1, :, 0], [1.0, 2.0, 3.0])

    def test_keepdims_operand(self):
        out = F.sub(np.ones((2, 3)), np.ones((2, 1)))
        self.assertEqual(out.shape, (2, 3))

    def test_incompatible_shapes(self):
        with self.assertRaises(InvalidArgumentError):
            F.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_per_channel_gradient_reduces(self):
        rng = np.random.default_rng(1)
        x, scale = rng.normal(size=(2, 3, 5)), rng.normal(size=3)
        self.assertLess(gradient_check(lambda a, b: F.sum(F.square(F.mul(a, b))), [x, scale]), TOLERANCE)


class TestElementwiseGradients(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)

    def test_div(self):
        a = self.rng.normal(size=(2, 3))
        b = self.rng.uniform(1.0, 2.0, size=(2, 3))
        self.assertLess(gradient_check(lambda x, y: F.sum(F.div(x, y)), [a, b]), TOLERANCE)

    def test_log10_and_sqrt(self):
        a = self.rng.uniform(0.5, 2.0, size=(4,))
        self.assertLess(gradient_check(lambda x: F.sum(F.log10(F.sqrt(x))), [a]), TOLERANCE)

    def test_prelu(self):
        x = self.rng.normal(size=(1, 3, 6))
        slope = np.array([0.1, 0.25, 0.5])
        self.assertLess(gradient_check(lambda a, s: F.sum(F.square(F.prelu(a, s))), [x, slope]), TOLERANCE)

    def test_amax_routes_to_first_winner(self):
        x = TensorNode(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        with Tape() as tape:
            tape.backward(F.sum(F.amax(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


class TestConvolutions(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.rng = np.random.default_rng(3)

    def test_conv1d_matches_correlation(self):
        x = self.rng.normal(size=(1, 1, 12))
        w = self.rng.normal(size=(1, 1, 3))
        out = F.conv1d(x, w)
        expected = signal.correlate(x[0, 0], w[0, 0], mode="valid", method="direct")
        np.testing.assert_allclose(out.values[0, 0], expected, atol=1e-12)

    def test_conv1d_output_length(self):
        out = F.conv1d(np.zeros((2, 1, 128)), np.zeros((4, 1, 16)), stride=8)
        self.assertEqual(out.shape, (2, 4, 15))

    def test_conv1d_gradient(self):
        x = self.rng.normal(size=(2, 4, 9))
        w = self.rng.normal(size=(2, 2, 3))
        b = self.rng.normal(size=(2,))

        def fn(a, weight, bias):
            return F.sum(F.square(F.conv1d(a, weight, bias, stride=2, dilation=2, groups=2, padding=2)))

        self.assertLess(gradient_check(fn, [x, w, b]), TOLERANCE)

    def test_depthwise_gradient(self):
        x = self.rng.normal(size=(1, 3, 8))
        w = self.rng.normal(size=(3, 1, 3))
        fn = lambda a, weight: F.sum(F.square(F.conv1d(a, weight, groups=3, padding=1)))  # noqa: E731
        self.assertLess(gradient_check(fn, [x, w]), TOLERANCE)

    def test_conv1d_rejects_mismatched_groups(self):
        with self.assertRaises(InvalidArgumentError):
            F.conv1d(np.zeros((1, 3, 8)), np.zeros((3, 2, 3)), groups=3)

    def test_conv1d_rejects_short_input(self):
        with self.assertRaises(InvalidArgumentError):
            F.conv1d(np.zeros((1, 1, 4)), np.zeros((1, 1, 8)))

    def test_transpose_is_adjoint_of_conv(self):
        x = self.rng.normal(size=(1, 3, 10))
        w = self.rng.normal(size=(2, 3, 4))
        y = self.rng.normal(size=(1, 2, 4))
        forward = F.conv1d(x, w, stride=2).values
        adjoint = F.conv_transpose1d(y, w, stride=2).values
        self.assertAlmostEqual(float(np.sum(forward * y)), float(np.sum(x * adjoint)), places=10)

    def test_conv_transpose_gradient(self):
        x = self.rng.normal(size=(2, 3, 5))
        w = self.rng.normal(size=(3, 1, 4))
        b = self.rng.normal(size=(1,))
        fn = lambda a, weight, bias: F.sum(F.square(F.conv_transpose1d(a, weight, bias, stride=2)))  # noqa: E731
        self.assertLess(gradient_check(fn, [x, w, b]), TOLERANCE)

    def test_zero_channel_contributes_exact_zero(self):
        x = self.rng.normal(size=(1, 3, 12))
        w = self.rng.normal(size=(2, 3, 3))
        x[:, 1] = 0.0
        full = F.conv1d(x, w).values
        reduced = F.conv1d(np.delete(x, 1, axis=1), np.delete(w, 1, axis=1)).values
        np.testing.assert_array_equal(full, reduced)


class TestChannelNorm(TestCase):
    def test_rows_are_normalized_independently(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 50)) * np.array([1.0, 10.0, 100.0])[None, :, None]
        out = F.channel_norm(x, np.ones(3), np.zeros(3)).values
        np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=2), 1.0, atol=1e-3)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x, gain, bias = rng.normal(size=(2, 3, 6)), rng.normal(size=3), rng.normal(size=3)
        weights = rng.normal(size=(2, 3, 6))
        fn = lambda a, g, b: F.sum(F.mul(F.channel_norm(a, g, b), weights))  # noqa: E731
        self.assertLess(gradient_check(fn, [x, gain, bias]), 1e-4)

    def test_needs_two_samples(self):
        with self.assertRaises(InvalidArgumentError):
            F.channel_norm(np.zeros((1, 2, 1)), np.ones(2), np.zeros(2))


class TestMaskRelaxation(TestCase):
    def test_equal_logits_without_noise_give_half(self):
        prob = F.gumbel_keep_probability(np.zeros((4, 2)), np.zeros((4, 2)), 1.0)
        np.testing.assert_allclose(prob.values, 0.5)

    def test_gumbel_gradient(self):
        rng = np.random.default_rng(6)
        noise = rng.gumbel(size=(5, 2))
        logits = rng.normal(size=(5, 2))
        fn = lambda z: F.sum(F.square(F.gumbel_keep_probability(z, noise, 0.7)))  # noqa: E731
        self.assertLess(gradient_check(fn, [logits]), TOLERANCE)

    def test_temperature_must_be_positive(self):
        with self.assertRaises(InvalidArgumentError):
            F.gumbel_keep_probability(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)

    def test_binarize_is_strict_and_passes_gradient_through(self):
        probabilities = TensorNode(np.array([0.7, 0.70001, 0.2]), requires_grad=True)
        with Tape() as tape:
            binary = F.binarize_ste(probabilities, 0.7)
            tape.backward(F.sum(F.scalar_mul(binary, 5.0)))
        np.testing.assert_array_equal(binary.values, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(probabilities.grad, [1.0, 1.0, 1.0])


class TestFitLength(TestCase):
    def test_crop_and_pad(self):
        x = np.arange(6, dtype=np.float64).reshape(1, 1, 6)
        np.testing.assert_array_equal(F.fit_length(x, 4).values, [[[0, 1, 2, 3]]])
        np.testing.assert_array_equal(F.fit_length(x, 8).values, [[[0, 1, 2, 3, 4, 5, 0, 0]]])


def random_shape(rng):
    return int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(8, 33))


def away_from_zero(rng, shape):
    return rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def projected(fn, inputs, rng):
    """The scalar sum(fn(*inputs) * R) for a fixed random R, so every output element carries its own weight."""
    weights = rng.normal(size=fn(*inputs).shape)
    return lambda *args: F.sum(F.mul(fn(*args), weights))


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def op_cases(rng):
    """Every differentiable op on randomized shapes with B <= 2, C <= 8 and L <= 32."""
    b, c, length = random_shape(rng)
    shape = (b, c, length)
    x = rng.normal(size=shape)
    groups = int(rng.choice(divisors(c)))
    kernel, dilation, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    out_channels = groups * int(rng.integers(1, 3))
    start = int(rng.integers(0, c))
    stop = int(rng.integers(start + 1, c + 1))
    # rows of well separated values so a finite-difference step cannot change the winner
    spread = np.argsort(rng.random(shape), axis=2) * 0.1 + rng.uniform(0.0, 0.01, size=shape)
    noise = rng.gumbel(size=(c, 2))
    temperature = float(rng.uniform(0.5, 2.0))
    target = int(rng.integers(4, 41))
    return {
        "add": (F.add, [x, rng.normal(size=shape)]),
        "sub": (F.sub, [x, rng.normal(size=c)]),
        "mul": (F.mul, [x, rng.normal(size=(b, c, 1))]),
        "div": (F.div, [x, rng.uniform(1.0, 2.0, size=shape)]),
        "scalar": (lambda a: F.scalar_add(F.scalar_mul(a, 1.7), 0.3), [x]),
        "relu": (F.relu, [away_from_zero(rng, shape)]),
        "prelu": (F.prelu, [away_from_zero(rng, shape), rng.uniform(0.0, 0.5, size=c)]),
        "sigmoid": (F.sigmoid, [x]),
        "exp": (F.exp, [0.5 * x]),
        "log10": (F.log10, [rng.uniform(0.5, 2.0, size=shape)]),
        "sqrt": (F.sqrt, [rng.uniform(0.5, 2.0, size=shape)]),
        "square": (F.square, [x]),
        "sum": (lambda a: F.sum(a, axis=2, keepdims=True), [x]),
        "mean": (lambda a: F.mean(a, axis=1), [x]),
        "amax": (lambda a: F.amax(a, axis=2), [spread]),
        "select_channel": (lambda a: F.select_channel(a, start), [x]),
        "slice_channels": (lambda a: F.slice_channels(a, start, stop), [x]),
        "concat_channels": (lambda a, z: F.concat_channels([a, z]), [x, rng.normal(size=(b, 2, length))]),
        "stack": (lambda a, z: F.stack([a, z], axis=1), [x, rng.normal(size=shape)]),
        "conv1d": (
            lambda a, w, bias: F.conv1d(a, w, bias, stride, dilation, groups, padding=1),
            [x, rng.normal(size=(out_channels, c // groups, kernel)), rng.normal(size=out_channels)],
        ),
        "conv_transpose1d": (
            lambda a, w, bias: F.conv_transpose1d(a, w, bias, stride),
            [x, rng.normal(size=(c, 2, kernel)), rng.normal(size=2)],
        ),
        "channel_norm": (F.channel_norm, [x, rng.normal(size=c), rng.normal(size=c)]),
        "gumbel_keep_probability": (
            lambda logits: F.gumbel_keep_probability(logits, noise, temperature),
            [rng.normal(size=(c, 2))],
        ),
        "fit_length": (lambda a: F.fit_length(a, target), [x]),
    }


class TestGradientsOverSeeds(TestCase):
    def test_every_op_matches_finite_differences(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            for name, (fn, inputs) in op_cases(rng).items():
                error = gradient_check(projected(fn, inputs, rng), inputs)
                self.assertLess(error, 1e-4, "{} at seed {}".format(name, seed))


if __name__ == "__main__":
    main()
