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

import encoder
import ptw
import tensor
from tensor import ShapeError
from tests import test_utils


def _image(size=16, seed=0):
    return np.random.RandomState(seed).rand(1, 3, size, size).astype(np.float32)


class TestEncoder(test_utils.PropihUnitTest):
    def setUp(self):
        super().setUp()
        self.weights = encoder.init_weights(base_width=4, seed=0)

    def test_stage_shapes(self):
        features = encoder.encode_image(_image(), self.weights)
        self.assertEqual([(1, 4, 16, 16), (1, 8, 8, 8), (1, 16, 4, 4), (1, 32, 2, 2)],
                         [f.shape for f in features])

    def test_full_width_channels(self):
        self.assertEqual([64, 128, 256, 512],
                         [encoder.stage_channels(64, k) for k in range(1, 5)])
        shapes = encoder.weight_shapes(64)
        self.assertEqual((64, 3, 3, 3), shapes['enc.s1.conv1.w'])
        self.assertEqual((512, 256, 3, 3), shapes['enc.s4.conv4.w'])
        self.assertEqual((512,), shapes['enc.s4.conv4.b'])
        # One conv in stage 1, two in stages 2 and 3, four in stage 4.
        self.assertEqual(18, len(shapes))

    def test_extents_must_divide_by_8(self):
        with self.assertRaises(ShapeError):
            encoder.encode_image(np.zeros((1, 3, 12, 16), dtype=np.float32), self.weights)
        with self.assertRaises(ShapeError):
            encoder.encode_image(np.zeros((1, 1, 16, 16), dtype=np.float32), self.weights)

    def test_weights_never_require_grad(self):
        self.assertTrue(all(not p.requires_grad for p in self.weights.params.values()))
        image = tensor.Tensor(_image(), requires_grad=True)
        with tensor.Tape() as tape:
            loss = tensor.sum(encoder.encode_image(image, self.weights)[-1])
        g_image, g_w = tensor.gradients(
            loss, tape, [image, self.weights.params['enc.s1.conv1.w']])
        self.assertTrue(np.any(g_image != 0))
        self.assertEqualNPArray(np.zeros_like(g_w), g_w)

    def test_prefix_stages_match(self):
        image = _image(seed=3)
        full = encoder.encode_image(image, self.weights)
        two = encoder.encode_image(image, self.weights, num_stages=2)
        self.assertEqual(2, len(two))
        for a, b in zip(full, two):
            self.assertEqualNPArray(a.data, b.data)

    def test_deterministic_init(self):
        other = encoder.init_weights(base_width=4, seed=0)
        for name, value in self.weights.params.items():
            self.assertEqualNPArray(value.data, other.params[name].data)
        different = encoder.init_weights(base_width=4, seed=1)
        self.assertNotEqualNPArray(self.weights.params['enc.s1.conv1.w'].data,
                                   different.params['enc.s1.conv1.w'].data)

    def test_masks_follow_stages(self):
        mask = np.zeros((1, 1, 16, 16), dtype=np.float32)
        mask[:, :, 4:12, 4:12] = 1
        stages = encoder.encode(_image(), mask, self.weights)
        self.assertEqual([(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)],
                         [m.shape for m in stages.masks])
        self.assertEqualNPArray(mask[:, :, ::4, ::4], stages.masks[2].data)
        self.assertEqualNPArray([[[[0, 0], [0, 1]]]], stages.masks[3].data)

    def test_mask_must_be_binary(self):
        mask = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
        with self.assertRaises(encoder.NonBinaryMaskError):
            encoder.encode(_image(), mask, self.weights)

    def test_mask_must_match_image(self):
        with self.assertRaises(ShapeError):
            encoder.encode(_image(), np.ones((1, 1, 8, 8), dtype=np.float32),
                           self.weights)

    def test_input_normalization(self):
        mean, std = [0.5, 0.4, 0.3], [0.2, 0.25, 0.3]
        normalized = encoder.init_weights(4, 0, mean, std)
        image = _image(seed=5)
        expected = (image - np.reshape(mean, (1, 3, 1, 1))) / np.reshape(std, (1, 3, 1, 1))
        a = encoder.encode_image(image, normalized)[-1]
        b = encoder.encode_image(expected.astype(np.float32), self.weights)[-1]
        self.assertAllClose(b, a, rtol=1e-4, atol=1e-5)

    def test_save_load_round_trip(self):
        path = self.tmp_path('encoder.ptw')
        encoder.save_weights(self.weights, path)
        loaded = encoder.load_weights(path)
        self.assertEqual(4, loaded.base_width)
        for name, value in self.weights.params.items():
            self.assertEqualNPArray(value.data, loaded.params[name].data)

    def test_load_checks_entries(self):
        path = self.tmp_path('encoder.ptw')
        entries = self.weights.to_entries()
        del entries['enc.s3.conv2.w']
        ptw.write_entries(entries, path)
        with self.assertRaises(ptw.MissingEntryError):
            encoder.load_weights(path, base_width=4)
        encoder.save_weights(self.weights, path)
        with self.assertRaises(ptw.EntryShapeError):
            encoder.load_weights(path, base_width=8)

    def test_astype(self):
        as64 = self.weights.astype(np.float64)
        self.assertEqual(np.float64, as64.dtype)
        out = encoder.encode_image(_image().astype(np.float64), as64)
        self.assertEqual(np.float64, out[-1].dtype)
