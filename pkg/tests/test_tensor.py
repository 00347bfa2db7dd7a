# Copyright 2018 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import numpy as np

import tensor
from tensor import ShapeError, Tensor
from tests import test_utils


def _rand(rs, *shape, low=-1.0, high=1.0):
    return rs.uniform(low, high, size=shape)


def _away_from_zero(rs, *shape):
    """Values with |v| in [0.2, 1], so kinks stay out of finite differences."""
    return rs.uniform(0.2, 1.0, size=shape) * rs.choice([-1, 1], size=shape)


def _weighted_sum(out, rs_seed=7):
    """A scalar with non-uniform weights, so every output element matters."""
    w = np.random.RandomState(rs_seed).uniform(0.5, 1.5, size=out.shape)
    return tensor.sum(out * w.astype(out.dtype))


class TestTensor(test_utils.PropihUnitTest):
    def test_default_dtype(self):
        self.assertEqual(np.float32, Tensor([1, 2]).dtype)
        self.assertEqual(np.float64, Tensor(np.zeros(2)).dtype)

    def test_numpy_does_not_swallow_tensors(self):
        out = np.ones(3, dtype=np.float32) * Tensor([1.0, 2.0, 3.0])
        self.assertIsInstance(out, Tensor)
        self.assertEqualNPArray([1.0, 2.0, 3.0], out.data)

    def test_no_tape_no_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2
        self.assertFalse(y.requires_grad)
        with tensor.Tape() as tape:
            z = x * 2
            c = Tensor([1.0, 2.0]) * 2
        self.assertTrue(z.requires_grad)
        self.assertFalse(c.requires_grad)
        self.assertEqual(1, len(tape))
        self.assertIsNone(tensor.current_tape())

    def test_backward_accumulates_into_leaves(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(x * x + x)
        tensor.backward(y, tape)
        self.assertAllClose([3.0, 5.0, 7.0], x.grad)
        with tensor.Tape() as tape:
            y = tensor.sum(x)
        tensor.backward(y, tape)
        self.assertAllClose([4.0, 6.0, 8.0], x.grad)
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = x * 3
        with self.assertRaises(ShapeError):
            tensor.backward(y, tape)

    def test_gradients_of_unused_input_are_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([[5.0]], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(x * 2)
        gx, gu = tensor.gradients(y, tape, [x, unused])
        self.assertAllClose([2.0, 2.0], gx)
        self.assertEqualNPArray(np.zeros((1, 1)), gu)
        self.assertIsNone(x.grad)

    def test_stop_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(x * tensor.stop_gradient(x))
        g, = tensor.gradients(y, tape, [x])
        self.assertAllClose([2.0], g)

    def test_broadcast_gradients(self):
        rs = np.random.RandomState(1)
        self.assertGradientsMatch(
            lambda t: _weighted_sum(t[0] * t[1] + t[1] / (t[0] * t[0] + 1.0) - t[1]),
            [_rand(rs, 2, 3, 4, 4), _rand(rs, 1, 3, 1, 1)])

    def test_elementwise_gradients(self):
        rs = np.random.RandomState(2)
        x = _away_from_zero(rs, 2, 3, 4)
        positive = rs.uniform(0.5, 2.0, size=(2, 3, 4))
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.relu(t[0])), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.sigmoid(t[0] * 3)), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.tanh(t[0])), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.exp(t[0])), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(-t[0]), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.log(t[0])), [positive])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.sqrt(t[0])), [positive])
        self.assertGradientsMatch(lambda t: _weighted_sum(t[0] ** 3), [x])
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.clip(t[0], -0.5, 0.5)),
            [rs.uniform(-0.45, 0.45, size=(2, 3, 4))])

    def test_sqrt_gradient_at_zero(self):
        x = Tensor([0.0, 4.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(tensor.sqrt(x))
        g, = tensor.gradients(y, tape, [x])
        self.assertAllClose([0.0, 0.25], g)

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, -1.0, 1.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(tensor.relu(x))
        g, = tensor.gradients(y, tape, [x])
        self.assertEqualNPArray([0.0, 0.0, 1.0], g)

    def test_clip_blocks_gradient_outside(self):
        x = Tensor([-2.0, 0.0, 2.0], requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.sum(tensor.clip(x, -1, 1))
        g, = tensor.gradients(y, tape, [x])
        self.assertEqualNPArray([0.0, 1.0, 0.0], g)

    def test_sigmoid_is_stable(self):
        out = tensor.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        self.assertAllClose([0.0, 0.5, 1.0], out)
        self.assertTrue(np.all(np.isfinite(out.data)))

    def test_where_gradients(self):
        rs = np.random.RandomState(3)
        cond = rs.rand(2, 1, 4, 4) > 0.5
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.where(cond, t[0] * 2, t[1])),
            [_rand(rs, 2, 3, 4, 4), _rand(rs, 2, 3, 4, 4)])

    def test_reduction_gradients(self):
        rs = np.random.RandomState(4)
        x = _rand(rs, 2, 3, 4, 5)
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.mean(t[0], axis=(2, 3), keepdims=True)), [x])
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.sum(t[0], axis=1)), [x])
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.reshape(t[0], (6, 20))), [x])

    def test_matmul_gradients(self):
        rs = np.random.RandomState(5)
        self.assertGradientsMatch(lambda t: _weighted_sum(t[0] @ t[1]),
                                  [_rand(rs, 3, 4), _rand(rs, 4, 2)])

    def test_matmul_shapes(self):
        with self.assertRaises(ShapeError):
            tensor.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_conv2d_matches_direct_loop(self):
        rs = np.random.RandomState(6)
        x = _rand(rs, 2, 3, 5, 5)
        w = _rand(rs, 4, 3, 3, 3)
        b = _rand(rs, 4)
        out = tensor.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 5, 5))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(5):
                        expected[n, o, i, j] = np.sum(
                            xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
        self.assertAllClose(expected, out, rtol=1e-10, atol=1e-12)

    def test_conv2d_stride(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = tensor.conv2d(x, w, stride=2)
        self.assertEqualNPArray([[[[0.0, 2.0], [8.0, 10.0]]]], out.data)

    def test_conv2d_gradients(self):
        rs = np.random.RandomState(7)
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.conv2d(t[0], t[1], t[2], padding=1)),
            [_rand(rs, 1, 2, 6, 6), _rand(rs, 3, 2, 3, 3), _rand(rs, 3)])
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.conv2d(t[0], t[1], stride=2)),
            [_rand(rs, 1, 2, 7, 7), _rand(rs, 3, 2, 3, 3)])

    def test_conv2d_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with self.assertRaises(ShapeError):
            tensor.conv2d(x, Tensor(np.zeros((3, 5, 3, 3))))
        with self.assertRaises(ShapeError):
            tensor.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(4)))
        with self.assertRaises(ShapeError):
            tensor.conv2d(x, Tensor(np.zeros((3, 2, 7, 7))), padding=1)
        with self.assertRaises(ShapeError):
            tensor.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))))

    def test_maxpool(self):
        x = Tensor(np.array([[[[1.0, 2.0, 0.0, 0.0],
                               [3.0, 4.0, 0.0, 0.0],
                               [5.0, 5.0, 1.0, 1.0],
                               [5.0, 5.0, 1.0, 2.0]]]]), requires_grad=True)
        with tensor.Tape() as tape:
            y = tensor.maxpool2x2(x)
            loss = tensor.sum(y)
        self.assertEqualNPArray([[[[4.0, 0.0], [5.0, 2.0]]]], y.data)
        g, = tensor.gradients(loss, tape, [x])
        # Ties go to the first element of the window in row-major order.
        self.assertEqualNPArray([[[[0, 0, 1, 0],
                                   [0, 1, 0, 0],
                                   [1, 0, 0, 0],
                                   [0, 0, 0, 1]]]], g)

    def test_pool_gradients(self):
        rs = np.random.RandomState(8)
        # Distinct values keep the argmax stable under perturbation.
        x = rs.permutation(64).reshape(1, 1, 8, 8) / 10.0
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.maxpool2x2(t[0])), [x])
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.avgpool2x2(t[0])), [x])

    def test_pool_needs_even_extents(self):
        with self.assertRaises(ShapeError):
            tensor.maxpool2x2(Tensor(np.zeros((1, 1, 5, 4))))
        with self.assertRaises(ShapeError):
            tensor.avgpool2x2(Tensor(np.zeros((1, 1, 4, 3))))

    def test_upsample_then_average_is_identity(self):
        rs = np.random.RandomState(9)
        x = Tensor(_rand(rs, 2, 3, 4, 5))
        self.assertAllClose(x, tensor.avgpool2x2(tensor.upsample_nearest(x, 2)))

    def test_upsample_gradients(self):
        rs = np.random.RandomState(10)
        x = _rand(rs, 1, 2, 3, 4)
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.upsample_nearest(t[0], 2)), [x])
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.upsample_bilinear(t[0], 2)), [x])

    def test_bilinear_rows_sum_to_one(self):
        m = tensor.bilinear_matrix(5, 2, np.float64)
        self.assertEqual((10, 5), m.shape)
        self.assertAllClose(np.ones(10), m.sum(axis=1))
        # Half-pixel centers: output 1 sits a quarter pixel after input 0.
        self.assertAllClose([0.75, 0.25, 0, 0, 0], m[1])
        self.assertAllClose([1, 0, 0, 0, 0], m[0])

    def test_bilinear_keeps_constants(self):
        x = Tensor(np.full((1, 2, 3, 3), 0.7))
        self.assertAllClose(np.full((1, 2, 6, 6), 0.7), tensor.upsample_bilinear(x, 2))

    def test_bad_upsample_scale(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        for scale in (0, 1.5, -2):
            with self.assertRaises(ShapeError):
                tensor.upsample_nearest(x, scale)

    def test_concat_and_slice(self):
        rs = np.random.RandomState(11)
        a, b = _rand(rs, 1, 2, 3, 3), _rand(rs, 1, 3, 3, 3)
        both = tensor.concat_channels(Tensor(a), Tensor(b))
        self.assertEqualNPArray(b, tensor.slice_channels(both, 2, 5).data)
        self.assertGradientsMatch(
            lambda t: _weighted_sum(tensor.slice_channels(
                tensor.concat_channels(t[0], t[1]), 1, 4)), [a, b])
        with self.assertRaises(ShapeError):
            tensor.concat_channels(Tensor(a), Tensor(np.zeros((1, 3, 2, 3))))

    def test_global_avg_pool(self):
        rs = np.random.RandomState(12)
        x = _rand(rs, 1, 3, 4, 4)
        self.assertAllClose(x.mean(axis=(2, 3)), tensor.global_avg_pool(Tensor(x)))
        self.assertGradientsMatch(lambda t: _weighted_sum(tensor.global_avg_pool(t[0])),
                                  [x])

    def test_float64_stays_float64(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = tensor.relu(x * 2.0 + 1.0)
        self.assertEqual(np.float64, y.dtype)
