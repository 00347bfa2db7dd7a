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

"""
Masked feature statistics and region-to-region AdaIN.

Statistics are taken over the masked positions only, with the population
standard deviation.  `zero_filled=True` instead measures the mask-multiplied
map over every position, for comparison with implementations that do so.
"""

from collections import namedtuple
import logging

import numpy as np

import tensor

DEFAULT_EPS = 1e-5


class EmptyRegionError(ValueError):
    pass


class MaskedStats(namedtuple('MaskedStats', ['mean', 'std', 'count'])):
    """Per-channel mean and std as [N, C, 1, 1] tensors.

    mean and std are None when count is 0.
    """

    @property
    def empty(self):
        return self.count == 0

    def detached(self):
        if self.empty:
            return self
        return MaskedStats(tensor.stop_gradient(self.mean),
                           tensor.stop_gradient(self.std), self.count)


class HarmonizedFeatures(namedtuple('HarmonizedFeatures', ['features', 'warnings'])):
    pass


def _mask_array(mask, dtype):
    values = mask.data if isinstance(mask, tensor.Tensor) else np.asarray(mask)
    return values.astype(dtype, copy=False)


def masked_stats(feat, mask, zero_filled=False):
    """Channel statistics of feat [N, C, H, W] where mask [N, 1, H, W] is 1."""
    m = _mask_array(mask, feat.dtype)
    if m.shape[2:] != feat.shape[2:]:
        raise tensor.ShapeError('mask %s does not cover features %s' % (
            m.shape, feat.shape))
    count = int(m.sum())
    if count == 0:
        return MaskedStats(None, None, 0)
    if zero_filled:
        masked = feat * m
        mean = tensor.mean(masked, axis=(2, 3), keepdims=True)
        centered = masked - mean
        var = tensor.mean(centered * centered, axis=(2, 3), keepdims=True)
    else:
        mean = tensor.sum(feat * m, axis=(2, 3), keepdims=True) * (1.0 / count)
        centered = (feat - mean) * m
        var = tensor.sum(centered * centered, axis=(2, 3), keepdims=True) * (1.0 / count)
    return MaskedStats(mean, tensor.sqrt(var), count)


def adain(feat, fg_mask, bg_mask, eps=DEFAULT_EPS, zero_filled=False):
    """Gives the foreground of feat the background's channel statistics.

    Returns (features, warning).  Background positions are passed through
    untouched.  With an empty foreground the input is returned unchanged along
    with a warning string.
    """
    fg_stats = masked_stats(feat, fg_mask, zero_filled)
    bg_stats = masked_stats(feat, bg_mask, zero_filled)
    if bg_stats.empty:
        raise EmptyRegionError(
            'background is empty at %dx%d; there is no style to transfer' %
            feat.shape[2:])
    if fg_stats.empty:
        warning = 'empty foreground at %dx%d, AdaIN skipped' % feat.shape[2:]
        logging.warning(warning)
        return feat, warning

    normalized = (feat - fg_stats.mean) / (fg_stats.std + eps)
    stylized = normalized * bg_stats.std + bg_stats.mean
    fg = _mask_array(fg_mask, feat.dtype) > 0
    return tensor.where(fg, stylized, feat), None


def harmonize_features(stages, eps=DEFAULT_EPS, zero_filled=False):
    """Applies adain at every stage of an encoder.StageFeatures."""
    features = []
    warnings = []
    for k, (feat, mask) in enumerate(zip(stages.features, stages.masks), start=1):
        m = _mask_array(mask, feat.dtype)
        out, warning = adain(feat, m, 1 - m, eps, zero_filled)
        features.append(out)
        if warning:
            warnings.append('stage %d: %s' % (k, warning))
    return HarmonizedFeatures(features, warnings)
