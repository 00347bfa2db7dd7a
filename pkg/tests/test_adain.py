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

import adain
import encoder
import tensor
from tensor import Tensor
from tests import test_utils


def _random_mask(rs, h, w, min_count=2):
    """A mask with at least min_count set and at least one unset position."""
    while True:
        mask = (rs.rand(1, 1, h, w) < rs.uniform(0.1, 0.9)).astype(np.float64)
        if min_count <= mask.sum() < h * w:
            return mask


def _region_stats(feat, mask):
    values = feat[0][:, mask[0, 0] > 0]
    return values.mean(axis=1), values.std(axis=1)


class TestAdain(test_utils.PropihUnitTest):
    def test_foreground_takes_background_statistics(self):
        rs = np.random.RandomState(0)
        for _ in range(1000):
            c, h, w = rs.randint(1, 5), rs.randint(2, 9), rs.randint(2, 9)
            feat = rs.randn(1, c, h, w) * rs.uniform(0.1, 3) + rs.uniform(-2, 2)
            fg = _random_mask(rs, h, w)
            out, warning = adain.adain(Tensor(feat), fg, 1 - fg, eps=1e-9)
            self.assertIsNone(warning)
            fg_mean, fg_std = _region_stats(out.data, fg)
            bg_mean, bg_std = _region_stats(feat, 1 - fg)
            self.assertAllClose(bg_mean, fg_mean, rtol=0, atol=1e-5)
            self.assertAllClose(bg_std, fg_std, rtol=0, atol=1e-5)
            bg = (1 - fg)[0, 0] > 0
            self.assertEqualNPArray(feat[0][:, bg], out.data[0][:, bg])

    def test_default_eps_in_float32(self):
        # The eps in the denominator shrinks the foreground std by a factor
        # fg_std / (fg_std + eps); the tolerance is that bias plus float32 noise.
        eps = adain.DEFAULT_EPS
        rs = np.random.RandomState(1)
        for _ in range(1000):
            c, h, w = rs.randint(1, 5), rs.randint(2, 9), rs.randint(2, 9)
            feat = (rs.randn(1, c, h, w) * rs.uniform(0.1, 3) +
                    rs.uniform(-2, 2)).astype(np.float32)
            fg = _random_mask(rs, h, w).astype(np.float32)
            out, warning = adain.adain(Tensor(feat), fg, 1 - fg)
            self.assertIsNone(warning)
            self.assertEqual(np.float32, out.dtype)
            fg_mean, fg_std = _region_stats(out.data.astype(np.float64), fg)
            bg_mean, bg_std = _region_stats(feat.astype(np.float64), 1 - fg)
            in_mean, in_std = _region_stats(feat.astype(np.float64), fg)
            conditioning = (np.abs(in_mean) + 3 * in_std) / (in_std + eps)
            noise = 1e-5 * (1 + np.abs(bg_mean) + bg_std) + 1e-6 * bg_std * conditioning
            self.assertTrue(np.all(np.abs(fg_mean - bg_mean) <= noise))
            bias = bg_std * eps / (in_std + eps)
            self.assertTrue(np.all(np.abs(fg_std - bg_std) <= bias + noise),
                            (fg_std, bg_std, bias))
            bg = (1 - fg)[0, 0] > 0
            self.assertEqualNPArray(feat[0][:, bg], out.data[0][:, bg])

    def test_applying_twice_changes_little(self):
        rs = np.random.RandomState(7)
        fg = np.zeros((1, 1, 8, 8), dtype=np.float32)
        fg[:, :, :, :4] = 1
        for _ in range(200):
            c = rs.randint(1, 5)
            scales = np.where(fg > 0, rs.uniform(0.5, 2), rs.uniform(0.5, 2))
            feat = (rs.randn(1, c, 8, 8) * scales + rs.uniform(-2, 2)).astype(np.float32)
            once, _ = adain.adain(Tensor(feat), fg, 1 - fg)
            twice, _ = adain.adain(once, fg, 1 - fg)
            inside = fg[0, 0] > 0
            change = np.linalg.norm(twice.data[0][:, inside] - once.data[0][:, inside])
            self.assertLess(change, 1e-4 * np.linalg.norm(once.data[0][:, inside]))

    def test_stats_scale_exactly(self):
        rs = np.random.RandomState(8)
        feat = rs.randn(1, 3, 6, 6).astype(np.float32)
        mask = _random_mask(rs, 6, 6).astype(np.float32)
        stats = adain.masked_stats(Tensor(feat), mask)
        for a in (2.0, -0.5, 4.0):
            scaled = adain.masked_stats(Tensor(feat * np.float32(a)), mask)
            self.assertEqualNPArray(stats.mean.data * np.float32(a), scaled.mean.data)
            self.assertEqualNPArray(stats.std.data * np.float32(abs(a)), scaled.std.data)

    def test_foreground_scales_with_the_input(self):
        rs = np.random.RandomState(9)
        feat = rs.randn(1, 3, 6, 6) * 1.5 + 0.3
        fg = _random_mask(rs, 6, 6, min_count=4)
        out, _ = adain.adain(Tensor(feat), fg, 1 - fg)
        for a in (0.25, 3.0, -2.0):
            scaled, _ = adain.adain(Tensor(feat * a), fg, 1 - fg,
                                    eps=abs(a) * adain.DEFAULT_EPS)
            self.assertAllClose(out.data * a, scaled.data, rtol=1e-9, atol=1e-12)

    def test_masked_stats(self):
        rs = np.random.RandomState(2)
        feat = rs.randn(1, 4, 6, 6)
        mask = _random_mask(rs, 6, 6)
        stats = adain.masked_stats(Tensor(feat), mask)
        mean, std = _region_stats(feat, mask)
        self.assertEqual((1, 4, 1, 1), stats.mean.shape)
        self.assertEqual(int(mask.sum()), stats.count)
        self.assertAllClose(mean, stats.mean.data.ravel(), rtol=1e-12, atol=1e-12)
        self.assertAllClose(std, stats.std.data.ravel(), rtol=1e-12, atol=1e-12)

    def test_zero_filled_stats_use_the_whole_map(self):
        rs = np.random.RandomState(3)
        feat = rs.randn(1, 2, 4, 4)
        mask = _random_mask(rs, 4, 4)
        stats = adain.masked_stats(Tensor(feat), mask, zero_filled=True)
        filled = feat * mask
        self.assertAllClose(filled.mean(axis=(2, 3)).ravel(), stats.mean.data.ravel())
        self.assertAllClose(filled.std(axis=(2, 3)).ravel(), stats.std.data.ravel())

    def test_empty_region_stats(self):
        stats = adain.masked_stats(Tensor(np.ones((1, 2, 4, 4))), np.zeros((1, 1, 4, 4)))
        self.assertTrue(stats.empty)
        self.assertIsNone(stats.mean)
        self.assertEqual(0, stats.count)

    def test_empty_foreground_passes_through(self):
        feat = Tensor(np.random.RandomState(4).randn(1, 2, 4, 4))
        fg = np.zeros((1, 1, 4, 4))
        out, warning = adain.adain(feat, fg, 1 - fg)
        self.assertIs(feat, out)
        self.assertIn('empty foreground', warning)

    def test_empty_background_raises(self):
        feat = Tensor(np.ones((1, 2, 4, 4)))
        fg = np.ones((1, 1, 4, 4))
        with self.assertRaises(adain.EmptyRegionError):
            adain.adain(feat, fg, 1 - fg)

    def test_constant_foreground_maps_to_background_mean(self):
        feat = np.zeros((1, 1, 4, 4))
        feat[0, 0, 2:, :] = np.arange(8).reshape(2, 4)
        fg = np.zeros((1, 1, 4, 4))
        fg[:, :, :2, :] = 1
        out, _ = adain.adain(Tensor(feat), fg, 1 - fg)
        self.assertAllClose(np.full((2, 4), 3.5), out.data[0, 0, :2])

    def test_gradients(self):
        rs = np.random.RandomState(5)
        fg = np.zeros((1, 1, 4, 4))
        fg[:, :, 1:3, 1:4] = 1
        w = rs.uniform(0.5, 1.5, size=(1, 3, 4, 4))

        def fn(t):
            out, _ = adain.adain(t[0], fg, 1 - fg)
            return tensor.sum(out * w.astype(out.dtype))
        self.assertGradientsMatch(fn, [rs.randn(1, 3, 4, 4)], probes=30)

    def test_harmonize_features(self):
        weights = encoder.init_weights(base_width=4, seed=0)
        rs = np.random.RandomState(6)
        image = rs.rand(1, 3, 16, 16).astype(np.float32)
        mask = np.zeros((1, 1, 16, 16), dtype=np.float32)
        mask[:, :, 1:3, 1:3] = 1
        harmonized = adain.harmonize_features(encoder.encode(image, mask, weights))
        self.assertEqual(4, len(harmonized.features))
        # The 2x2 foreground vanishes from the stage-3 and stage-4 masks.
        self.assertEqual(2, len(harmonized.warnings))
        self.assertTrue(harmonized.warnings[0].startswith('stage 3'))
