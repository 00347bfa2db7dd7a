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

"""Harmonization by optimizing the foreground pixels directly.

Matching the background's statistics at a shallow encoder stage only moves
colors; deeper stages also move texture.  optimize_composite makes that
visible: it runs Adam on the composite's foreground pixels to match the
background statistics at one stage (or all stages up to it) while keeping
stage-4 content close to the composite.
"""

from collections import namedtuple, OrderedDict

import numpy as np
from tqdm import tqdm

import adain
import adam
import encoder as encoder_lib
import tensor


class StepRecord(namedtuple('StepRecord', ['step', 'style', 'content', 'total'])):
    pass


def style_targets(features, bg_masks):
    """Detached background statistics of each stage."""
    targets = []
    for feat, bg in zip(features, bg_masks):
        stats = adain.masked_stats(feat, bg)
        if stats.empty:
            raise adain.EmptyRegionError('background is empty at %dx%d' %
                                         feat.shape[2:])
        targets.append(stats.detached())
    return targets


def _style_term(feat, fg_mask, target):
    stats = adain.masked_stats(feat, fg_mask)
    if stats.empty:
        return None
    d_mean = stats.mean - target.mean
    d_std = stats.std - target.std
    return tensor.sum(d_mean * d_mean) + tensor.sum(d_std * d_std)


def optimize_composite(sample, encoder, level, steps=200, lr=0.01,
                       content_weight=1.0, cumulative=True):
    """Optimizes the foreground of sample.composite toward the background style.

    Args:
      sample: composites.CompositeSample.
      encoder: encoder.EncoderWeights.
      level: encoder stage 1..4 whose statistics are matched.
      cumulative: match stages 1..level rather than level alone.
    Returns:
      (image [1, 3, H, W] float array, [StepRecord]).  Background pixels equal
      the composite's exactly.
    """
    if not 1 <= level <= encoder_lib.NUM_STAGES:
        raise ValueError('level must be in 1..4, got %s' % level)
    if steps < 0:
        raise ValueError('steps must be >= 0, got %s' % steps)
    dtype = encoder.dtype
    composite = np.asarray(sample.composite, dtype=dtype)
    top = encoder_lib.encode(tensor.Tensor(composite), sample.fg_mask, encoder)
    bg_masks = [1 - m.data for m in top.masks]
    targets = style_targets(top.features, bg_masks)
    content_target = tensor.stop_gradient(top.features[-1])
    levels = range(1, level + 1) if cumulative else [level]

    fg = np.asarray(sample.fg_mask, dtype=dtype) > 0
    image = tensor.Tensor(composite.copy(), requires_grad=True)
    params = OrderedDict([('image', image)])
    state = adam.AdamState(lr=lr)
    history = []
    for step in tqdm(range(steps), desc='level %d' % level, unit='steps',
                     disable=steps < 50):
        with tensor.Tape() as tape:
            features = encoder_lib.encode_image(image, encoder)
            style = 0.0
            for k in levels:
                term = _style_term(features[k - 1], top.masks[k - 1], targets[k - 1])
                if term is not None:
                    style = style + term
            diff = features[-1] - content_target
            content = tensor.sum(diff * diff)
            loss = content * content_weight + style
        grad, = tensor.gradients(loss, tape, [image])
        adam.adam_step(params, {'image': np.where(fg, grad, 0).astype(dtype)}, state)
        image.data = np.where(fg, np.clip(image.data, 0, 1), composite).astype(dtype)
        history.append(StepRecord(step + 1, float(style), float(content), float(loss)))
    return image.data, history
