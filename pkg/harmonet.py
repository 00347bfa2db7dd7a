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
The progressive dual-branch harmonization network.

Top branch: the frozen encoder, then AdaIN at each of its four stages.
Bottom branch: for each stage k a decoder (one conv block, then k upsample
blocks) lifts the harmonized stage-k features to full resolution with
base_width/4 channels.  Stage 1 uses its decoder output directly; stage k > 1
fuses it with the previous stage's result through the fusion blocks.  A 3x3
conv turns every stage into an image, and a GRU over the pooled stage features
scores stages 1-3 for early exit.

Parameter names:
  dec.s{k}.conv.{w,b}            decoder conv block of stage k
  dec.s{k}.up{j}.{w,b}           j-th upsample block (scale 1 for j=1, else 2)
  fuse.s{k}.b{b}.conv{i}.{w,b}   fusion block b of stage k (k >= 2)
  out.s{k}.{w,b}                 output conv of stage k
  gru.{wz,uz,bz,wr,ur,br,wh,uh,bh,wo,bo}
  meta.config                    [version, base_width, image_size, gru_hidden,
                                  fusion blocks]

GRU kernels are stored [inputs, hidden] and applied to row vectors.
"""

from collections import namedtuple, OrderedDict
import json
import logging
import os

import numpy as np

import adain
import encoder as encoder_lib
import ptw
import tensor
from tensor import ShapeError

NUM_STAGES = encoder_lib.NUM_STAGES
NUM_SCORED_STAGES = 3
MODEL_VERSION = 1

GRU_PARAMS = ('wz', 'uz', 'bz', 'wr', 'ur', 'br', 'wh', 'uh', 'bh', 'wo', 'bo')


class ConfigError(ValueError):
    pass


_CONFIG_DEFAULTS = OrderedDict([
    ('base_width', 64),
    ('image_size', 256),
    ('gru_hidden', 32),
    ('exit_threshold', 0.5),
    ('adain_eps', adain.DEFAULT_EPS),
    ('full_style_loss_all_stages', False),
    ('last_stage_loss_only', False),
    ('bilinear_decoder', False),
    ('single_fusion_block', False),
    ('zero_filled_stats', False),
    ('stop_target_gradient', True),
    ('normalize_style_loss', False),
    ('detach_exit_features', False),
    ('input_mean', None),
    ('input_std', None),
    ('seed', 0),
])


class HarmonizerConfig(namedtuple('HarmonizerConfig', list(_CONFIG_DEFAULTS),
                                  defaults=list(_CONFIG_DEFAULTS.values()))):
    """Architecture, ablation and loss switches.  Serialized as JSON."""

    @property
    def out_channels(self):
        return self.base_width // 4

    @property
    def fusion_blocks(self):
        return 1 if self.single_fusion_block else 2

    def validate(self):
        if self.base_width < 4 or self.base_width % 4:
            raise ConfigError('base_width must be a positive multiple of 4, got %s' %
                              self.base_width)
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError('image_size must be a positive multiple of 8, got %s' %
                              self.image_size)
        if self.gru_hidden < 1:
            raise ConfigError('gru_hidden must be >= 1, got %s' % self.gru_hidden)
        if not 0 < self.exit_threshold < 1:
            raise ConfigError('exit_threshold must be in (0, 1), got %s' %
                              self.exit_threshold)
        if not self.adain_eps > 0:
            raise ConfigError('adain_eps must be positive, got %s' % self.adain_eps)
        if (self.input_mean is None) != (self.input_std is None):
            raise ConfigError('input_mean and input_std must be set together')
        if self.input_mean is not None:
            if len(self.input_mean) != 3 or len(self.input_std) != 3:
                raise ConfigError('input_mean/input_std need 3 values each')
            if min(self.input_std) <= 0:
                raise ConfigError('input_std must be positive')
        return self

    def to_dict(self):
        return OrderedDict(self._asdict())

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls._fields)
        if unknown:
            raise ConfigError('unknown config keys: %s' % ', '.join(sorted(unknown)))
        return cls(**d).validate()

    def to_json(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except ValueError as e:
                raise ConfigError('%s: not valid JSON: %s' % (path, e))
        if not isinstance(d, dict):
            raise ConfigError('%s: expected a JSON object' % path)
        return cls.from_dict(d)


class StageOutput(namedtuple('StageOutput', ['image', 'exit_score', 'pooled'])):
    """image: [1, 3, S, S]; exit_score: [1, 1] Tensor for stages 1-3, else None."""

    @property
    def score(self):
        return None if self.exit_score is None else float(self.exit_score)


class BottomState(namedtuple('BottomState', ['decoded', 'features', 'pooled'])):
    """Decoder outputs, per-stage bottom features and their pooled vectors."""
    pass


class HarmonizeResult(namedtuple('HarmonizeResult', [
        'stage_outputs', 'predicted_exit', 'warnings', 'top', 'harmonized',
        'bottom'])):

    @property
    def exit_scores(self):
        return [o.score for o in self.stage_outputs if o.exit_score is not None]


def decoder_plan(config, k):
    """[(name, c_in, c_out, scale)] for stage k's decoder; scale None marks
    the conv block."""
    c = encoder_lib.stage_channels(config.base_width, k)
    plan = [('dec.s%d.conv' % k, c, c // 2, None)]
    c //= 2
    for j in range(1, k + 1):
        plan.append(('dec.s%d.up%d' % (k, j), c, c // 2, 1 if j == 1 else 2))
        c //= 2
    return plan


def fusion_plan(config, k):
    q = config.out_channels
    plan = []
    for b in range(1, config.fusion_blocks + 1):
        for i in (1, 2):
            c_in = 2 * q if (b, i) == (1, 1) else q
            plan.append(('fuse.s%d.b%d.conv%d' % (k, b, i), c_in, q))
    return plan


def param_shapes(config):
    shapes = OrderedDict()

    def conv(name, c_in, c_out):
        shapes[name + '.w'] = (c_out, c_in, 3, 3)
        shapes[name + '.b'] = (c_out,)

    for k in range(1, NUM_STAGES + 1):
        for name, c_in, c_out, _ in decoder_plan(config, k):
            conv(name, c_in, c_out)
        if k > 1:
            for name, c_in, c_out in fusion_plan(config, k):
                conv(name, c_in, c_out)
        conv('out.s%d' % k, config.out_channels, 3)

    i, h = config.out_channels, config.gru_hidden
    for gate in 'zrh':
        shapes['gru.w' + gate] = (i, h)
        shapes['gru.u' + gate] = (h, h)
        shapes['gru.b' + gate] = (h,)
    shapes['gru.wo'] = (h, 1)
    shapes['gru.bo'] = (1,)
    return shapes


def init_params(config):
    """He-normal convs, scaled-normal GRU kernels, zero biases; seeded."""
    rs = np.random.RandomState(config.seed + 1)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if len(shape) == 4:
            std = np.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
        elif len(shape) == 2:
            std = 1.0 / np.sqrt(shape[0])
        else:
            std = 0.0
        value = rs.normal(0, std, size=shape) if std else np.zeros(shape)
        params[name] = tensor.Tensor(value.astype(np.float32), requires_grad=True)
    return params


class Harmonizer(object):
    """Config, frozen encoder and trainable parameters of one network."""

    def __init__(self, config, encoder=None, params=None):
        self.config = config.validate()
        if encoder is None:
            encoder = encoder_lib.init_weights(
                config.base_width, config.seed, config.input_mean, config.input_std)
        if encoder.base_width != config.base_width:
            raise ConfigError('encoder base_width %d != config base_width %d' % (
                encoder.base_width, config.base_width))
        self.encoder = encoder
        self.params = params if params is not None else init_params(config)

    def trainable_parameters(self):
        return self.params

    def exit_head_parameters(self):
        return OrderedDict((k, v) for k, v in self.params.items()
                           if k.startswith('gru.'))

    def harmonizer_parameters(self):
        return OrderedDict((k, v) for k, v in self.params.items()
                           if not k.startswith('gru.'))

    def state_arrays(self):
        """Copies of every weight, encoder included, keyed by entry name."""
        arrays = OrderedDict((k, v.data.copy())
                             for k, v in self.encoder.params.items())
        arrays.update((k, v.data.copy()) for k, v in self.params.items())
        return arrays

    def astype(self, dtype):
        params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        return Harmonizer(self.config, self.encoder.astype(dtype), params)


def _conv(x, params, name, relu=True):
    y = tensor.conv2d(x, params[name + '.w'], params[name + '.b'], padding=1)
    return tensor.relu(y) if relu else y


def decoder_forward(feature, k, params, config):
    """Lifts harmonized stage-k features to [1, base_width/4, S, S]."""
    expected = encoder_lib.stage_channels(config.base_width, k)
    if feature.shape[1] != expected:
        raise ShapeError('stage %d decoder expects %d channels, got %d' % (
            k, expected, feature.shape[1]))
    upsample = tensor.upsample_bilinear if config.bilinear_decoder \
        else tensor.upsample_nearest
    x = feature
    for name, _, _, scale in decoder_plan(config, k):
        if scale is not None and scale > 1:
            x = upsample(x, scale)
        x = _conv(x, params, name)
    return x


def fusion_forward(concat_feat, k, params, config):
    """Fuses [previous bottom features, decoded_k] (2q channels) down to q channels."""
    if k < 2:
        raise ValueError('stage 1 has no fusion blocks')
    q = config.out_channels
    if concat_feat.shape[1] != 2 * q:
        raise ShapeError('stage %d fusion expects %d channels, got %d' % (
            k, 2 * q, concat_feat.shape[1]))
    x = concat_feat
    for name, _, _ in fusion_plan(config, k):
        x = _conv(x, params, name)
    return x


def gru_step(h_prev, x, params):
    """One GRU cell update and exit score.

    Args:
      h_prev: [1, H] hidden state.
      x: [1, I] pooled stage features.
    Returns:
      (score [1, 1], h_next [1, H])
    """
    p = {name: params['gru.' + name] for name in GRU_PARAMS}
    if x.shape[1] != p['wz'].shape[0] or h_prev.shape[1] != p['uz'].shape[0]:
        raise ShapeError('gru_step: input %s / hidden %s do not match kernels %s, %s' % (
            x.shape, h_prev.shape, p['wz'].shape, p['uz'].shape))
    z = tensor.sigmoid(x @ p['wz'] + h_prev @ p['uz'] + p['bz'])
    r = tensor.sigmoid(x @ p['wr'] + h_prev @ p['ur'] + p['br'])
    candidate = tensor.tanh(x @ p['wh'] + (r * h_prev) @ p['uh'] + p['bh'])
    h_next = (1.0 - z) * h_prev + z * candidate
    score = tensor.sigmoid(h_next @ p['wo'] + p['bo'])
    return score, h_next


def initial_hidden(config, dtype=np.float32):
    return tensor.Tensor(np.zeros((1, config.gru_hidden), dtype=dtype))


def decide_exit(scores, threshold=0.5):
    """Earliest stage whose score is strictly above threshold, else 4."""
    for k, score in enumerate(scores[:NUM_SCORED_STAGES], start=1):
        if score > threshold:
            return k
    return NUM_STAGES


def forward(sample, model, num_stages=NUM_STAGES, early_exit=False,
            threshold=None):
    """Runs the network on a composites.CompositeSample.

    Args:
      num_stages: compute stages 1..num_stages only.
      early_exit: stop after the first scored stage above threshold.
      threshold: overrides config.exit_threshold.
    Returns:
      HarmonizeResult.  predicted_exit is 4 when no computed score passes the
      threshold, even if stage 4 was not computed.
    """
    config = model.config
    if threshold is None:
        threshold = config.exit_threshold
    if not 1 <= num_stages <= NUM_STAGES:
        raise ValueError('num_stages must be in 1..%d, got %s' % (NUM_STAGES, num_stages))
    size = config.image_size
    if tuple(sample.composite.shape) != (1, 3, size, size):
        raise ShapeError('composite %s does not match image_size %d' % (
            tuple(sample.composite.shape), size))

    dtype = model.encoder.dtype
    composite = tensor.Tensor(np.asarray(sample.composite, dtype=dtype))
    top = encoder_lib.encode(composite, sample.fg_mask, model.encoder, num_stages)
    harmonized = adain.harmonize_features(top, config.adain_eps,
                                          config.zero_filled_stats)
    warnings = list(harmonized.warnings)

    params = model.params
    outputs, decoded, bottom, pooled = [], [], [], []
    h = initial_hidden(config, dtype)
    for k in range(1, num_stages + 1):
        dec = decoder_forward(harmonized.features[k - 1], k, params, config)
        decoded.append(dec)
        if k == 1:
            fb = dec
        else:
            fb = fusion_forward(tensor.concat_channels(bottom[-1], dec), k,
                                params, config)
        bottom.append(fb)
        image = _conv(fb, params, 'out.s%d' % k, relu=False)

        score = None
        if k <= NUM_SCORED_STAGES:
            fk = tensor.global_avg_pool(fb)
            pooled.append(fk)
            if config.detach_exit_features:
                fk = tensor.stop_gradient(fk)
            score, h = gru_step(h, fk, params)
        outputs.append(StageOutput(
            image, score, pooled[-1] if score is not None else None))

        if early_exit and score is not None and float(score) > threshold:
            break

    scores = [o.score for o in outputs if o.exit_score is not None]
    return HarmonizeResult(outputs, decide_exit(scores, threshold), warnings, top,
                           harmonized, BottomState(decoded, bottom, pooled))


def save_model(model, path):
    """Writes the PTW weights to path and the config to path + '.json'."""
    config = model.config
    entries = model.encoder.to_entries()
    entries.update((k, v.data) for k, v in model.params.items())
    entries['meta.config'] = np.array([
        MODEL_VERSION, config.base_width, config.image_size, config.gru_hidden,
        config.fusion_blocks], dtype=np.float32)
    ptw.write_entries(entries, path)
    config.to_json(path + '.json')


def load_model(path, config=None):
    """Loads a model written by save_model.

    config defaults to the JSON sidecar; a config whose architecture disagrees
    with the weight file raises ConfigError.
    """
    if config is None:
        sidecar = path + '.json'
        if not os.path.exists(sidecar):
            raise ConfigError('no config given and no sidecar %s' % sidecar)
        config = HarmonizerConfig.from_json(sidecar)
    config.validate()

    entries = ptw.read_entries(path)
    meta = ptw.require(entries, 'meta.config', (5,), path)
    stored = dict(zip(['version', 'base_width', 'image_size', 'gru_hidden',
                       'fusion_blocks'], (int(v) for v in meta)))
    if stored['version'] != MODEL_VERSION:
        raise ConfigError('%s: unsupported model version %d' % (path, stored['version']))
    for key in ('base_width', 'image_size', 'gru_hidden', 'fusion_blocks'):
        if stored[key] != getattr(config, key):
            raise ConfigError('%s: file has %s=%d but config has %d' % (
                path, key, stored[key], getattr(config, key)))

    encoder = encoder_lib.weights_from_entries(
        entries, config.base_width, path, config.input_mean, config.input_std)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        value = ptw.require(entries, name, shape, path)
        params[name] = tensor.Tensor(value.copy(), requires_grad=True)
    logging.info("Loaded model %s (base_width %d, image_size %d)", path,
                 config.base_width, config.image_size)
    return Harmonizer(config, encoder, params)
