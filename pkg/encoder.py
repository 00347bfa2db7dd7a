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
The frozen four-stage VGG-19-style feature extractor.

Stage k ends at the activation of conv{k}_1 (relu1_1 .. relu4_1):

  stage 1: conv1_1
  stage 2: conv1_2, pool, conv2_1
  stage 3: conv2_2, pool, conv3_1
  stage 4: conv3_2, conv3_3, conv3_4, pool, conv4_1

Every conv is 3x3, pad 1, followed by ReLU.  Weights are stored under
"enc.s{k}.conv{i}.w" / "enc.s{k}.conv{i}.b", i counting convs within stage k,
so real VGG-19 weights can be exported to PTW and loaded here.
"""

from collections import namedtuple, OrderedDict
import logging

import numpy as np

import ptw
import tensor
from tensor import ShapeError

NUM_STAGES = 4

# Per stage: 'conv' doubles/keeps channels as listed, 'pool' halves extents.
# Channel entries are multiples of base_width; 0 means "same as input".
_STAGE_PLAN = [
    [('conv', 1)],
    [('conv', 0), 'pool', ('conv', 2)],
    [('conv', 0), 'pool', ('conv', 4)],
    [('conv', 0), ('conv', 0), ('conv', 0), 'pool', ('conv', 8)],
]


class NonBinaryMaskError(ValueError):
    pass


class StageFeatures(namedtuple('StageFeatures', ['features', 'masks'])):
    """Encoder outputs F_k and the foreground mask at each stage's resolution."""
    pass


def stage_channels(base_width, k):
    return base_width * 2 ** (k - 1)


def layer_plan(base_width):
    """Yields (stage, layers) with layers as ('conv', name, c_in, c_out) or
    ('pool',)."""
    c_in = 3
    for k, stage in enumerate(_STAGE_PLAN, start=1):
        layers = []
        conv_index = 0
        for layer in stage:
            if layer == 'pool':
                layers.append(('pool',))
                continue
            conv_index += 1
            c_out = c_in if layer[1] == 0 else base_width * layer[1]
            layers.append(('conv', 'enc.s%d.conv%d' % (k, conv_index), c_in, c_out))
            c_in = c_out
        yield k, layers


def weight_shapes(base_width):
    shapes = OrderedDict()
    for _, layers in layer_plan(base_width):
        for layer in layers:
            if layer[0] == 'conv':
                _, name, c_in, c_out = layer
                shapes[name + '.w'] = (c_out, c_in, 3, 3)
                shapes[name + '.b'] = (c_out,)
    return shapes


class EncoderWeights(object):
    """Read-only encoder parameters.  Nothing here ever requires a gradient."""
    frozen = True

    def __init__(self, base_width, params, input_mean=None, input_std=None):
        self.base_width = base_width
        self.params = params
        self.input_mean = input_mean
        self.input_std = input_std

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return EncoderWeights(
            self.base_width,
            OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
            self.input_mean, self.input_std)

    def to_entries(self):
        return OrderedDict((k, v.data) for k, v in self.params.items())


def init_weights(base_width=64, seed=0, input_mean=None, input_std=None):
    """He-normal (fan-in) conv weights and zero biases from a fixed seed."""
    rs = np.random.RandomState(seed)
    params = OrderedDict()
    for name, shape in weight_shapes(base_width).items():
        if name.endswith('.w'):
            fan_in = shape[1] * shape[2] * shape[3]
            value = rs.normal(0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            value = np.zeros(shape)
        params[name] = tensor.Tensor(value.astype(np.float32))
    return EncoderWeights(base_width, params, input_mean, input_std)


def weights_from_entries(entries, base_width, path=None,
                         input_mean=None, input_std=None):
    params = OrderedDict()
    for name, shape in weight_shapes(base_width).items():
        value = ptw.require(entries, name, shape, path)
        params[name] = tensor.Tensor(value.copy())
    return EncoderWeights(base_width, params, input_mean, input_std)


def save_weights(weights, path):
    entries = weights.to_entries()
    entries['enc.meta'] = np.array([weights.base_width], dtype=np.float32)
    ptw.write_entries(entries, path)


def load_weights(path, base_width=None):
    """Loads encoder weights; base_width defaults to the one stored in the file."""
    entries = ptw.read_entries(path)
    if base_width is None:
        base_width = int(ptw.require(entries, 'enc.meta', (1,), path)[0])
    logging.info('Loaded encoder weights (base_width %d) from %s', base_width, path)
    return weights_from_entries(entries, base_width, path)


def check_mask(mask):
    values = np.asarray(mask.data if isinstance(mask, tensor.Tensor) else mask)
    if not np.all((values == 0) | (values == 1)):
        raise NonBinaryMaskError('mask must contain only 0 and 1')
    return values


def downsample_mask(mask, k):
    """Nearest-neighbor (top-left sample) mask at stage k resolution."""
    step = 2 ** (k - 1)
    return mask[:, :, ::step, ::step]


def _normalize(image, weights):
    if weights.input_mean is None:
        return image
    shape = (1, 3, 1, 1)
    mean = np.asarray(weights.input_mean, dtype=image.dtype).reshape(shape)
    std = np.asarray(weights.input_std, dtype=image.dtype).reshape(shape)
    return (image - mean) / std


def encode_image(image, weights, num_stages=NUM_STAGES):
    """Returns [F_1, ..., F_num_stages] for image [1, 3, H, W]."""
    image = tensor.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError('encoder expects a [N, 3, H, W] image, got %s' % (image.shape,))
    h, w = image.shape[2:]
    if h % 8 or w % 8:
        raise ShapeError('image extents %dx%d are not divisible by 8' % (h, w))

    x = _normalize(image, weights)
    features = []
    for k, layers in layer_plan(weights.base_width):
        if k > num_stages:
            break
        for layer in layers:
            if layer[0] == 'pool':
                x = tensor.maxpool2x2(x)
            else:
                name = layer[1]
                x = tensor.relu(tensor.conv2d(
                    x, weights.params[name + '.w'], weights.params[name + '.b'],
                    padding=1))
        features.append(x)
    return features


def encode(image, mask, weights, num_stages=NUM_STAGES):
    """Encodes image [1, 3, H, W] and carries mask [1, 1, H, W] to each stage."""
    features = encode_image(image, weights, num_stages)
    mask = check_mask(mask)
    if mask.shape != (image.shape[0], 1) + tuple(image.shape[2:]):
        raise ShapeError('mask shape %s does not match image %s' % (
            mask.shape, image.shape))
    masks = [tensor.Tensor(downsample_mask(mask, k).astype(features[0].dtype))
             for k in range(1, len(features) + 1)]
    return StageFeatures(features, masks)
