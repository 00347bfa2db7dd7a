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

"""Train a harmonizer.

Joint phase: every step runs all four stages on a batch, averages the joint
loss over the batch and takes one Adam step over the decoder, fusion, output
and GRU weights.  Exit head phase: only the GRU is trained, on the BCE terms of
annotated samples.

Usage:
  python propih.py train --config=cfg.json --data=manifest.json --out=model.ptw
"""

from collections import namedtuple, OrderedDict
from concurrent import futures
import json
import logging
import math
import os

import numpy as np
from tqdm import tqdm

import adam
import composites
import harmonet
import losses
import ptw
import tensor
import utils


class NonFiniteLossError(FloatingPointError):
    pass


def _default_threads():
    return int(os.environ.get('PROPIH_THREADS', '1') or 1)


_TRAIN_DEFAULTS = OrderedDict([
    ('lr', 1e-4),
    ('batch_size', 4),
    ('image_size', 256),
    ('steps', 1000),
    ('seed', 0),
    ('checkpoint_every', 0),
    ('checkpoint_dir', None),
    ('annotations', None),
    ('harmonizer', None),
    ('threads', None),
    ('exit_head_steps', 0),
    ('exit_head_lr', 1e-3),
    ('log_every', 10),
])


class TrainConfig(namedtuple('TrainConfig', list(_TRAIN_DEFAULTS),
                             defaults=list(_TRAIN_DEFAULTS.values()))):
    """Optimizer and schedule settings.

    `harmonizer` holds HarmonizerConfig fields (ablation flags included);
    image_size is taken from this config.
    """

    def validate(self):
        if not self.lr > 0:
            raise harmonet.ConfigError('lr must be positive, got %s' % self.lr)
        if self.batch_size < 1:
            raise harmonet.ConfigError('batch_size must be >= 1, got %s' %
                                       self.batch_size)
        if self.steps < 0 or self.exit_head_steps < 0:
            raise harmonet.ConfigError('step counts must be >= 0')
        if self.checkpoint_every < 0:
            raise harmonet.ConfigError('checkpoint_every must be >= 0')
        if not self.exit_head_lr > 0:
            raise harmonet.ConfigError('exit_head_lr must be positive')
        self.harmonizer_config()
        return self

    @property
    def num_threads(self):
        return max(1, self.threads if self.threads else _default_threads())

    def harmonizer_config(self):
        fields = dict(self.harmonizer or {})
        if fields.get('image_size', self.image_size) != self.image_size:
            raise harmonet.ConfigError(
                'harmonizer image_size %s disagrees with image_size %s' % (
                    fields['image_size'], self.image_size))
        fields['image_size'] = self.image_size
        return harmonet.HarmonizerConfig.from_dict(fields)

    def to_dict(self):
        return OrderedDict(self._asdict())

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls._fields)
        if unknown:
            raise harmonet.ConfigError('unknown train config keys: %s' %
                                       ', '.join(sorted(unknown)))
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as e:
                raise harmonet.ConfigError('%s: not valid JSON: %s' % (path, e))
        if not isinstance(d, dict):
            raise harmonet.ConfigError('%s: expected a JSON object' % path)
        return cls.from_dict(d)


class TrainResult(namedtuple('TrainResult', ['model', 'log', 'optimizer'])):
    pass


def batch_indices(step, num_samples, batch_size, seed):
    """Sample indices for a step.

    Position p = step * batch_size + i walks through epochs, each a fixed
    permutation seeded by (seed, epoch); so any step's batch is reproducible
    without replaying earlier steps.
    """
    indices = []
    permutations = {}
    for i in range(batch_size):
        position = step * batch_size + i
        epoch, offset = divmod(position, num_samples)
        if epoch not in permutations:
            permutations[epoch] = np.random.RandomState([seed, epoch]).permutation(
                num_samples)
        indices.append(int(permutations[epoch][offset]))
    return indices


def _check_finite(report, sample_id, step):
    for name, value in report.items():
        if not math.isfinite(value):
            raise NonFiniteLossError('step %d, sample %s: %s is %s' % (
                step, sample_id, name, value))


def _check_annotations(dataset, annotations):
    by_id = composites.annotations_by_id(annotations or [])
    ids = set(s.id for s in dataset)
    unknown = sorted(set(by_id) - ids)
    if unknown:
        raise ValueError('annotations name samples not in the dataset: %s' %
                         ', '.join(unknown[:5]))
    return by_id


def _sample_gradients(sample, model, labels, scale, step):
    """(gradients, LossReport) of scale * joint loss for one sample."""
    params = model.trainable_parameters()
    with tensor.Tape() as tape:
        result = harmonet.forward(sample, model)
        loss, report, _ = losses.compute_losses(result, sample, model, labels)
        scaled = loss * scale
    _check_finite(report, sample.id, step)
    grads = tensor.gradients(scaled, tape, list(params.values())) \
        if scaled.requires_grad else [np.zeros_like(p.data) for p in params.values()]
    return grads, report


def _sum_gradients(per_sample, names):
    total = OrderedDict()
    for i, name in enumerate(names):
        acc = per_sample[0][i]
        for grads in per_sample[1:]:
            acc = acc + grads[i]
        total[name] = acc
    return total


def _write_log(log_file, record):
    if log_file is not None:
        utils.append_jsonl(log_file, record)


def checkpoint_path(checkpoint_dir, step):
    return os.path.join(checkpoint_dir, '%06d-checkpoint.ptw' % step)


def save_checkpoint(model, optimizer, path):
    """Model at path (+ .json sidecar), optimizer state at <path>-adam.ptw."""
    harmonet.save_model(model, path)
    ptw.write_entries(optimizer.to_entries(), path + '-adam.ptw')


def load_checkpoint(path, config):
    """Returns (model, AdamState) saved by save_checkpoint."""
    model = harmonet.load_model(path)
    optimizer = adam.AdamState.from_entries(ptw.read_entries(path + '-adam.ptw'),
                                            lr=config.lr)
    return model, optimizer


def resume(path, dataset, annotations, config, log_path=None):
    """Continues training from a checkpoint written by save_checkpoint."""
    model, optimizer = load_checkpoint(path, config)
    logging.info('Resuming from %s at step %d', path, optimizer.step)
    return train(dataset, annotations, config, model, optimizer, log_path)


def train(dataset, annotations, config, model=None, optimizer=None,
          log_path=None):
    """Minimizes the joint objective for config.steps steps.

    Args:
      dataset: list of composites.CompositeSample.
      annotations: AnnotationRecords for the labeled subset (may be empty).
      model, optimizer: resume from these instead of a fresh init; training
        continues at step optimizer.step.
      log_path: JSON-lines log, appended to.
    Returns:
      TrainResult(model, records, optimizer)
    """
    config.validate()
    if not dataset:
        raise ValueError('cannot train on an empty dataset')
    labels_by_id = _check_annotations(dataset, annotations)
    if model is None:
        model = harmonet.Harmonizer(config.harmonizer_config())
    if optimizer is None:
        optimizer = adam.AdamState(lr=config.lr)
    params = model.trainable_parameters()
    names = list(params)
    scale = 1.0 / config.batch_size
    threads = config.num_threads

    def run_sample(index, step):
        sample = dataset[index]
        record = labels_by_id.get(sample.id)
        labels = record.labels if record is not None else None
        return _sample_gradients(sample, model, labels, scale, step)

    records = []
    log_file = open(log_path, 'a') if log_path else None
    pool = futures.ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        with utils.logged_timer('Training %d steps' % (config.steps - optimizer.step)):
            for step in tqdm(range(optimizer.step, config.steps), desc='train',
                             unit='steps', disable=config.steps < 20):
                batch = batch_indices(step, len(dataset), config.batch_size, config.seed)
                if pool is not None:
                    outcomes = list(pool.map(lambda i: run_sample(i, step), batch))
                else:
                    outcomes = [run_sample(i, step) for i in batch]
                grads = _sum_gradients([g for g, _ in outcomes], names)
                adam.adam_step(params, grads, optimizer)

                report = losses.LossReport.mean([r for _, r in outcomes],
                                                model.config.last_stage_loss_only)
                record = report.to_record(step + 1)
                records.append(record)
                _write_log(log_file, record)
                if config.log_every and (step + 1) % config.log_every == 0:
                    logging.info('step %d: loss %.4f, bce %.4f', step + 1,
                                 report.all, sum(report.bce) / len(report.bce))
                if config.checkpoint_every and config.checkpoint_dir and \
                        (step + 1) % config.checkpoint_every == 0:
                    utils.ensure_dir_exists(config.checkpoint_dir)
                    save_checkpoint(model, optimizer,
                                    checkpoint_path(config.checkpoint_dir, step + 1))
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()
    return TrainResult(model, records, optimizer)


def pooled_stage_features(model, samples):
    """Detached pooled bottom features of stages 1-3, per sample."""
    pooled = []
    for sample in tqdm(samples, desc='pooling', unit='samples',
                       disable=len(samples) < 64):
        result = harmonet.forward(sample, model, num_stages=harmonet.NUM_SCORED_STAGES)
        pooled.append([tensor.stop_gradient(f) for f in result.bottom.pooled])
    return pooled


def exit_head_loss(pooled, labels, params, config):
    """Sum of the three BCE terms over one sample's pooled features."""
    h = harmonet.initial_hidden(config, pooled[0].dtype)
    loss = 0.0
    for x, label in zip(pooled, labels):
        score, h = harmonet.gru_step(h, x, params)
        loss = loss + losses.bce_loss(score, float(label))
    return loss


def train_exit_head_only(dataset, annotations, config, model, log_path=None):
    """Fits the GRU exit head alone on the annotated samples.

    Harmonizer weights are untouched; the pooled features are computed once.
    """
    config.validate()
    labels_by_id = _check_annotations(dataset, annotations)
    labeled = [s for s in dataset if s.id in labels_by_id]
    if not labeled:
        raise ValueError('exit head training needs annotated samples')
    params = model.exit_head_parameters()
    names = list(params)
    optimizer = adam.AdamState(lr=config.exit_head_lr)

    with utils.logged_timer('Pooling features of %d samples' % len(labeled)):
        pooled = pooled_stage_features(model, labeled)
    labels = [labels_by_id[s.id].labels for s in labeled]

    batch_size = min(config.batch_size, len(labeled))
    records = []
    log_file = open(log_path, 'a') if log_path else None
    try:
        for step in tqdm(range(config.exit_head_steps), desc='exit head',
                         unit='steps', disable=config.exit_head_steps < 20):
            batch = batch_indices(step, len(labeled), batch_size, config.seed)
            with tensor.Tape() as tape:
                loss = 0.0
                for i in batch:
                    loss = loss + exit_head_loss(pooled[i], labels[i], params,
                                                 model.config)
                loss = loss * (1.0 / batch_size)
            if not math.isfinite(float(loss)):
                raise NonFiniteLossError('exit head step %d: bce is %s' % (
                    step, float(loss)))
            grads = tensor.gradients(loss, tape, list(params.values()))
            adam.adam_step(params, OrderedDict(zip(names, grads)), optimizer)
            record = OrderedDict([('step', step + 1), ('bce', float(loss))])
            records.append(record)
            _write_log(log_file, record)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, records, optimizer)
