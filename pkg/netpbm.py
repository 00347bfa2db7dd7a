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

"""Binary PPM (P6) images and PGM (P5) masks, 8 bits per sample.

Images load as float32 [1, 3, H, W] in [0, 1]; masks as float32 [1, 1, H, W]
with bytes >= 128 mapped to 1.  Saving clamps to [0, 1] and rounds half up.
"""

import os

import numpy as np
from PIL import Image

import tensor

MASK_THRESHOLD = 128


class ImageFormatError(ValueError):
    pass


def _read(path, expected_mode):
    """uint8 raster of a PIL image of the given mode, [H, W] or [H, W, C]."""
    try:
        with Image.open(path) as image:
            image.load()
            mode = image.mode
            raster = np.asarray(image)
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError('%s: cannot read image: %s' % (path, e))
    if mode != expected_mode:
        raise ImageFormatError('%s: expected an 8-bit %s image, got mode %s' % (
            path, expected_mode, mode))
    return raster


def _as_array(image):
    if isinstance(image, tensor.Tensor):
        image = image.data
    return np.asarray(image)


def quantize(values):
    """[0, 1] floats -> uint8, clamped, rounding half up."""
    clamped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255 + 0.5).astype(np.uint8)


def _write(path, raster):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(raster)).save(path, format='PPM')


def load_image(path):
    raster = _read(path, 'RGB')
    return (raster.transpose(2, 0, 1)[None] / np.float32(255)).astype(np.float32)


def save_image(image, path):
    image = _as_array(image)
    if image.ndim == 4:
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError('expected a [1, 3, H, W] or [3, H, W] image, got %s' %
                               (image.shape,))
    _write(path, quantize(image).transpose(1, 2, 0))


def load_mask(path):
    raster = _read(path, 'L')
    return (raster >= MASK_THRESHOLD).astype(np.float32)[None, None]


def save_mask(mask, path):
    mask = _as_array(mask)
    mask = mask.reshape(mask.shape[-2:])
    _write(path, np.where(mask > 0.5, 255, 0).astype(np.uint8))
