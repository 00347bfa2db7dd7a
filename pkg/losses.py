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
Training objectives.

For stage k the style loss re-encodes the stage image and matches the masked
foreground statistics of encoder stages 1..k against those of the harmonized
top-branch features; the content loss compares stage-4 features of the stage
image and of the composite.  The joint objective adds the exit BCE terms of
stages 1-3 for labeled samples.
"""

from collections import namedtuple, OrderedDict
import logging

import numpy as np

import adain
import encoder as encoder_lib
import harmonet
import tensor

BCE_CLIP = 1e-7


class LossReport(namedtuple('LossReport', ['style', 'content', 'total', 'bce', 'all'])):
    """Loss terms as python floats.  bce holds 0.0 for unlabeled samples.

    total and all are summed from the float terms, not from the tensors.
    """

    @classmethod
    def from_terms(cls, style, content, bce, last_stage_only=False):
        style = tuple(float(s) for s in style)
        content = tuple(float(c) for c in content)
        bce = tuple(float(b) for b in bce)
        total = tuple(c + s for c, s in zip(content, style))
        kept = total[-1:] if last_stage_only else total
        return cls(style, content, total, bce, sum(kept + bce))

    def to_record(self, step):
        record = OrderedDict([('step', step)])
        for name, values in (('sty', self.style), ('con', self.content),
                             ('tot', self.total), ('bce', self.bce)):
            for k, value in enumerate(values, start=1):
                record['%s%d' % (name, k)] = value
        record['all'] = self.all
        return record

    def items(self):
        """(name, value) for every term, in log order."""
        return [(k, v) for k, v in self.to_record(0).items() if k != 'step']

    @classmethod
    def mean(cls, reports, last_stage_only=False):
        n = len(reports)

        def average(field):
            values = [getattr(r, field) for r in reports]
            return [sum(v[k] for v in values) / n for k in range(len(values[0]))]

        return cls.from_terms(average('style'), average('content'), average('bce'),
                              last_stage_only)


def _zero(dtype):
    return tensor.Tensor(np.zeros((), dtype=dtype))


def style_targets(harmonized, masks, config):
    """Masked foreground statistics of the harmonized top-branch features."""
    targets = []
    for feat, mask in zip(harmonized.features, masks):
        stats = adain.masked_stats(feat, mask, config.zero_filled_stats)
        targets.append(stats.detached() if config.stop_target_gradient else stats)
    return targets


def style_levels(k, config):
    return encoder_lib.NUM_STAGES if config.full_style_loss_all_stages else k


def style_loss(stage_image, k, fg_masks, targets, encoder, config, features=None):
    """Cumulative statistics gap of stage_image over encoder stages 1..k.

    Returns (loss, warnings).  Stages with an empty foreground contribute 0.
    """
    if not 1 <= k <= encoder_lib.NUM_STAGES:
        raise ValueError('stage must be in 1..4, got %s' % k)
    levels = style_levels(k, config)
    if features is None:
        features = encoder_lib.encode_image(stage_image, encoder, levels)
    loss = _zero(stage_image.dtype)
    warnings = []
    for level in range(1, levels + 1):
        stats = adain.masked_stats(features[level - 1], fg_masks[level - 1],
                                   config.zero_filled_stats)
        target = targets[level - 1]
        if stats.empty or target.empty:
            warnings.append('stage %d style level %d: empty foreground' % (k, level))
            continue
        d_mean = stats.mean - target.mean
        d_std = stats.std - target.std
        term = tensor.sum(d_mean * d_mean) + tensor.sum(d_std * d_std)
        if config.normalize_style_loss:
            term = term * (1.0 / stats.mean.shape[1])
        loss = loss + term
    for warning in warnings:
        logging.warning(warning)
    return loss, warnings


def content_loss(stage_image, composite, encoder, features=None, target=None):
    """Sum of squared differences of stage-4 features, no mask."""
    if target is None:
        target = encoder_lib.encode_image(composite, encoder)[-1]
    target = tensor.stop_gradient(target)
    if features is None:
        features = encoder_lib.encode_image(stage_image, encoder)
    diff = features[encoder_lib.NUM_STAGES - 1] - target
    return tensor.sum(diff * diff)


def bce_loss(score, label):
    """-[y log p + (1 - y) log(1 - p)] with p clipped to [1e-7, 1 - 1e-7]."""
    score = tensor.as_tensor(score)
    p = tensor.clip(score, BCE_CLIP, 1 - BCE_CLIP)
    loss = -(label * tensor.log(p) + (1.0 - label) * tensor.log(1.0 - p))
    return tensor.sum(loss)


def total_loss(totals, bces, config):
    """Joint loss: per-stage totals plus BCE terms.

    Under last_stage_loss_only only the stage-4 total is kept.  Works on
    floats as well as Tensors.
    """
    kept = totals[-1:] if config.last_stage_loss_only else totals
    result = 0.0
    for term in list(kept) + list(bces):
        result = result + term
    return result


def compute_losses(result, sample, model, labels=None):
    """All loss terms of one forward pass over four stages.

    Args:
      result: harmonet.HarmonizeResult with all four stages.
      labels: exit labels of stages 1-3, or None for an unlabeled sample.
    Returns:
      (joint loss Tensor, LossReport, warnings)
    """
    config = model.config
    if len(result.stage_outputs) != harmonet.NUM_STAGES:
        raise ValueError('losses need all %d stages, got %d' % (
            harmonet.NUM_STAGES, len(result.stage_outputs)))
    targets = style_targets(result.harmonized, result.top.masks, config)
    content_target = result.top.features[-1]

    styles, contents, totals, warnings = [], [], [], []
    for k, output in enumerate(result.stage_outputs, start=1):
        features = encoder_lib.encode_image(output.image, model.encoder)
        sty, sty_warnings = style_loss(output.image, k, result.top.masks, targets,
                                       model.encoder, config, features)
        con = content_loss(output.image, sample.composite, model.encoder,
                           features, content_target)
        warnings.extend(sty_warnings)
        styles.append(sty)
        contents.append(con)
        totals.append(con + sty)

    bces = []
    if labels is not None:
        for output, label in zip(result.stage_outputs, labels):
            bces.append(bce_loss(output.exit_score, float(label)))

    loss = total_loss(totals, bces, config)
    if not isinstance(loss, tensor.Tensor):
        loss = _zero(model.encoder.dtype)
    bce_values = bces or (0.0,) * harmonet.NUM_SCORED_STAGES
    report = LossReport.from_terms(styles, contents, bce_values,
                                   config.last_stage_loss_only)
    return loss, report, warnings
