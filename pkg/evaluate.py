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

"""Evaluation: exit-stage histograms and accuracy, FLOPs and latency to exit.

FLOP convention: a multiply-add is 2 FLOPs.  Convolutions count
2*kh*kw*C_in*C_out*H'*W' plus C_out*H'*W' for the bias; ReLU, pooling and
upsampling count 1 per output element; global average pooling 1 per input
element.  The GRU step costs 6*(I*H + H*H) for its six matrix products plus
14*H elementwise FLOPs, and its score head 2*H + 2.  AdaIN, channel
concatenation and input normalization are not counted.
"""

from collections import namedtuple, OrderedDict
import statistics
import time

import numpy as np
from tqdm import tqdm

import composites
import encoder as encoder_lib
import harmonet

FLOP_CONVENTION = 'multiply-add = 2 FLOPs'


class ExitHistogram(namedtuple('ExitHistogram', ['counts', 'fractions'])):
    """counts per stage 1-4; fractions is None when there is nothing to count."""

    @property
    def total(self):
        return sum(self.counts)

    def to_dict(self):
        return OrderedDict([
            ('counts', list(self.counts)),
            ('fractions', None if self.fractions is None
             else [round(f, 4) for f in self.fractions]),
            ('total', self.total),
        ])


class FlopsReport(namedtuple('FlopsReport', ['stage_flops', 'cumulative', 'layers',
                                             'convention'])):
    """Incremental and cumulative FLOPs for exiting after stages 1-4.

    layers lists (stage, name, flops) in execution order.
    """

    def to_dict(self):
        return OrderedDict([
            ('convention', self.convention),
            ('stage_flops', list(self.stage_flops)),
            ('cumulative', list(self.cumulative)),
        ])


class StageTiming(namedtuple('StageTiming', ['stage', 'median', 'mean', 'min',
                                             'max', 'count'])):
    """Seconds per image when computing stages 1..stage."""

    def to_dict(self):
        return OrderedDict(self._asdict())


class ExitAccuracy(namedtuple('ExitAccuracy', ['label_accuracy', 'exit_accuracy',
                                               'count', 'histogram'])):
    """Agreement of the exit head with annotations.

    label_accuracy: fraction of per-stage exit labels predicted right.
    exit_accuracy: fraction of samples whose predicted exit stage is the
      annotated one.
    """

    def to_dict(self):
        return OrderedDict([
            ('label_accuracy', self.label_accuracy),
            ('exit_accuracy', self.exit_accuracy),
            ('count', self.count),
            ('predicted', self.histogram.to_dict()),
        ])


def exit_histogram(stages):
    """Counts exit stages; accepts ints or AnnotationRecords."""
    counts = [0] * harmonet.NUM_STAGES
    for stage in stages:
        stage = getattr(stage, 'exit_stage', stage)
        if stage not in range(1, harmonet.NUM_STAGES + 1):
            raise ValueError('exit stage must be in 1..4, got %r' % (stage,))
        counts[stage - 1] += 1
    total = sum(counts)
    fractions = [c / total for c in counts] if total else None
    return ExitHistogram(counts, fractions)


def conv_flops(c_in, c_out, height, width, kernel=3):
    return 2 * kernel * kernel * c_in * c_out * height * width + c_out * height * width


def gru_flops(inputs, hidden):
    return 6 * (inputs * hidden + hidden * hidden) + 14 * hidden + 2 * hidden + 2


def _stage_layers(config, k):
    """(name, flops) of everything stage k adds to the computation."""
    layers = []
    size = config.image_size
    res = size // 2 ** (k - 1)

    # Encoder stage k.
    for stage, plan in encoder_lib.layer_plan(config.base_width):
        if stage != k:
            continue
        r = size // 2 ** max(k - 2, 0)
        channels = None
        for layer in plan:
            if layer[0] == 'pool':
                r //= 2
                layers.append(('enc.s%d.pool' % k, channels * r * r))
            else:
                _, name, c_in, c_out = layer
                layers.append((name, conv_flops(c_in, c_out, r, r)))
                layers.append((name + '.relu', c_out * r * r))
                channels = c_out

    # Decoder.
    r = res
    for name, c_in, c_out, scale in harmonet.decoder_plan(config, k):
        if scale is not None and scale > 1:
            r *= scale
            layers.append((name + '.upsample', c_in * r * r))
        layers.append((name, conv_flops(c_in, c_out, r, r)))
        layers.append((name + '.relu', c_out * r * r))

    if k > 1:
        for name, c_in, c_out in harmonet.fusion_plan(config, k):
            layers.append((name, conv_flops(c_in, c_out, size, size)))
            layers.append((name + '.relu', c_out * size * size))

    q = config.out_channels
    layers.append(('out.s%d' % k, conv_flops(q, 3, size, size)))
    if k <= harmonet.NUM_SCORED_STAGES:
        layers.append(('pool.s%d' % k, q * size * size))
        layers.append(('gru.s%d' % k, gru_flops(q, config.gru_hidden)))
    return layers


def count_flops(config):
    """Analytic FLOPs of inference exiting after each stage."""
    config.validate()
    stage_flops, layers = [], []
    for k in range(1, harmonet.NUM_STAGES + 1):
        stage_layers = _stage_layers(config, k)
        stage_flops.append(sum(f for _, f in stage_layers))
        layers.extend((k, name, f) for name, f in stage_layers)
    cumulative = list(np.cumsum(stage_flops).tolist())
    return FlopsReport(stage_flops, cumulative, layers, FLOP_CONVENTION)


def expected_flops(report, fractions):
    """Average cost per image when fractions[k-1] of images exit at stage k."""
    if len(fractions) != harmonet.NUM_STAGES:
        raise ValueError('need %d exit fractions, got %d' % (
            harmonet.NUM_STAGES, len(fractions)))
    return sum(f * c for f, c in zip(fractions, report.cumulative))


def mean_flops_to_exit(report, predicted_stages):
    """Mean cost of a set of images, each counted up to its exit stage."""
    predicted_stages = list(predicted_stages)
    if not predicted_stages:
        raise ValueError('no exit stages given')
    return sum(report.cumulative[k - 1] for k in predicted_stages) / len(predicted_stages)


def time_stages(model, samples, repetitions=10):
    """Wall-clock seconds per image when computing stages 1..k, k = 1..4."""
    if repetitions < 1:
        raise ValueError('repetitions must be >= 1, got %s' % repetitions)
    if not samples:
        raise ValueError('timing needs at least one sample')
    timings = []
    for k in range(1, harmonet.NUM_STAGES + 1):
        measurements = []
        for _ in tqdm(range(repetitions), desc='stage %d' % k, unit='reps',
                      disable=repetitions < 10):
            for sample in samples:
                start = time.perf_counter()
                harmonet.forward(sample, model, num_stages=k)
                measurements.append(time.perf_counter() - start)
        timings.append(StageTiming(k, statistics.median(measurements),
                                   statistics.mean(measurements),
                                   min(measurements), max(measurements),
                                   len(measurements)))
    return timings


def predict_exits(model, samples, threshold=None):
    """(exit scores, predicted exit stage) for each sample."""
    predictions = []
    for sample in samples:
        result = harmonet.forward(sample, model, num_stages=harmonet.NUM_SCORED_STAGES,
                                  threshold=threshold)
        predictions.append((result.exit_scores, result.predicted_exit))
    return predictions


def exit_label_accuracy(model, samples, annotations, threshold=None):
    """Compares the exit head's decisions with annotated exit stages."""
    if threshold is None:
        threshold = model.config.exit_threshold
    by_id = composites.annotations_by_id(annotations)
    labeled = [s for s in samples if s.id in by_id]
    if not labeled:
        raise ValueError('none of the samples is annotated')
    label_hits = exit_hits = 0
    predicted = []
    for sample, (scores, exit_stage) in zip(labeled, predict_exits(model, labeled,
                                                                   threshold)):
        record = by_id[sample.id]
        label_hits += sum(int(s > threshold) == y for s, y in zip(scores, record.labels))
        exit_hits += int(exit_stage == record.exit_stage)
        predicted.append(exit_stage)
    n = len(labeled)
    return ExitAccuracy(label_hits / (n * harmonet.NUM_SCORED_STAGES), exit_hits / n,
                        n, exit_histogram(predicted))


# Text tables.

def format_histogram(histogram):
    lines = ['{:<8}{:>10}{:>12}'.format('Stage', 'Count', 'Fraction')]
    for k, count in enumerate(histogram.counts, start=1):
        fraction = '-' if histogram.fractions is None \
            else '{:.4f}'.format(histogram.fractions[k - 1])
        lines.append('{:<8d}{:>10d}{:>12}'.format(k, count, fraction))
    lines.append('{:<8}{:>10d}'.format('Total', histogram.total))
    return '\n'.join(lines)


def format_flops(report, fractions=None):
    lines = ['FLOPs ({})'.format(report.convention),
             '{:<8}{:>18}{:>18}{:>10}'.format('Exit', 'Stage', 'Cumulative', 'GFLOPs')]
    for k, (inc, cum) in enumerate(zip(report.stage_flops, report.cumulative), start=1):
        lines.append('{:<8d}{:>18,d}{:>18,d}{:>10.3f}'.format(k, inc, cum, cum / 1e9))
    if fractions is not None:
        lines.append('Expected per image: {:.3f} GFLOPs'.format(
            expected_flops(report, fractions) / 1e9))
    return '\n'.join(lines)


def format_timings(timings):
    lines = ['{:<8}{:>12}{:>12}{:>12}{:>12}{:>8}'.format(
        'Exit', 'Median ms', 'Mean ms', 'Min ms', 'Max ms', 'Runs')]
    for t in timings:
        lines.append('{:<8d}{:>12.2f}{:>12.2f}{:>12.2f}{:>12.2f}{:>8d}'.format(
            t.stage, t.median * 1e3, t.mean * 1e3, t.min * 1e3, t.max * 1e3, t.count))
    return '\n'.join(lines)
