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
Composite samples: a foreground pasted onto a painterly background.

Also home to exit-stage annotations, dataset manifests and the synthetic
desk-scale dataset (value-noise "paintings" with flat or gradient shapes
pasted on top).

Arrays are float32 NCHW: composite/background [1, 3, S, S], masks
[1, 1, S, S] holding only 0 and 1.
"""

from collections import namedtuple, Counter, OrderedDict
import json
import logging
import os

import numpy as np
from tqdm import tqdm

import netpbm

MIN_FG_RATIO = 0.05
MAX_FG_RATIO = 0.3
PLACEMENT_RETRIES = 100
NUM_EXIT_STAGES = 4


class PlacementError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


class Placement(namedtuple('Placement', ['top', 'left'])):
    pass


class CompositeSample(namedtuple('CompositeSample', [
        'composite', 'background', 'fg_mask', 'id'])):

    @property
    def bg_mask(self):
        return 1 - self.fg_mask

    @property
    def size(self):
        return self.composite.shape[-1]

    @property
    def fg_ratio(self):
        return float(self.fg_mask.mean())


class AnnotationRecord(namedtuple('AnnotationRecord', ['sample_id', 'exit_stage'])):

    @property
    def labels(self):
        return derive_labels(self.exit_stage)


def foreground_ratio(mask):
    """Fraction of the frame covered by the mask."""
    return float(np.asarray(mask).mean())


def compose(foreground, fg_mask, background, placement=None, sample_id=''):
    """Pastes foreground [1, 3, h, w] with mask [1, 1, h, w] onto background.

    placement is the (top, left) of the foreground in the frame; None means
    the foreground already has the background's extents.  The foreground must
    lie inside the frame and cover between 5% and 30% of it.
    """
    background = np.asarray(background, dtype=np.float32)
    fg_mask = np.asarray(fg_mask, dtype=np.float32)
    if not np.all((fg_mask == 0) | (fg_mask == 1)):
        raise PlacementError('foreground mask must be binary')
    _, _, height, width = background.shape
    h, w = fg_mask.shape[-2:]
    top, left = placement if placement is not None else (0, 0)
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise PlacementError('%dx%d foreground at (%d, %d) leaves the %dx%d frame' % (
            h, w, top, left, height, width))

    mask = np.zeros((1, 1, height, width), dtype=np.float32)
    mask[:, :, top:top + h, left:left + w] = fg_mask
    ratio = foreground_ratio(mask)
    if not MIN_FG_RATIO <= ratio <= MAX_FG_RATIO:
        raise PlacementError('foreground ratio %.5f outside [%.2f, %.2f]' % (
            ratio, MIN_FG_RATIO, MAX_FG_RATIO))

    canvas = background.copy()
    canvas[:, :, top:top + h, left:left + w] = foreground
    composite = np.where(mask > 0, canvas, background).astype(np.float32)
    return CompositeSample(composite, background, mask, sample_id)


def derive_labels(exit_stage):
    """Exit labels for stages 1-3: 0 before exit_stage, 1 from it on."""
    if isinstance(exit_stage, bool) or exit_stage not in range(1, NUM_EXIT_STAGES + 1):
        raise AnnotationError('exit stage must be in 1..4, got %r' % (exit_stage,))
    return tuple(0 if k < exit_stage else 1 for k in range(1, NUM_EXIT_STAGES))


def _check_stage(value, where):
    if isinstance(value, bool) or not isinstance(value, int) or \
            not 1 <= value <= NUM_EXIT_STAGES:
        raise AnnotationError('%s: exit_stage must be an integer in 1..4, got %r' % (
            where, value))
    return value


def _read_jsonl(path):
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = '%s:%d' % (path, line_no)
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise AnnotationError('%s: %s' % (where, e))
            if not isinstance(obj, dict) or not isinstance(obj.get('id'), str):
                raise AnnotationError('%s: expected an object with a string "id"' % where)
            yield where, obj


def load_annotations(path):
    """Reads {"id": str, "exit_stage": int} JSON lines."""
    records = []
    seen = set()
    for where, obj in _read_jsonl(path):
        sample_id = obj['id']
        if sample_id in seen:
            raise AnnotationError('%s: duplicate id %r' % (where, sample_id))
        seen.add(sample_id)
        records.append(AnnotationRecord(sample_id,
                                        _check_stage(obj.get('exit_stage'), where)))
    return records


def save_annotations(records, path):
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps({'id': record.sample_id,
                                'exit_stage': record.exit_stage}) + '\n')


def aggregate_votes(path):
    """Collapses {"id", "annotator", "exit_stage"} votes to one stage per id.

    The most voted stage wins; ties go to the earliest stage.
    """
    votes = OrderedDict()
    for where, obj in _read_jsonl(path):
        stage = _check_stage(obj.get('exit_stage'), where)
        votes.setdefault(obj['id'], Counter())[stage] += 1
    records = []
    for sample_id, counts in votes.items():
        best = max(counts.values())
        records.append(AnnotationRecord(
            sample_id, min(s for s, c in counts.items() if c == best)))
    return records


def annotations_by_id(records):
    return {r.sample_id: r for r in records}


# Synthetic data.

def _value_noise(rs, size, octaves=4):
    """Multi-octave value noise in [0, 1], [size, size]."""
    field = np.zeros((size, size))
    amplitude, total = 1.0, 0.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1) + 1
        grid = rs.uniform(size=(cells, cells))
        coords = np.linspace(0, cells - 1, size)
        rows = np.array([np.interp(coords, np.arange(cells), grid[:, c])
                         for c in range(cells)]).T
        layer = np.array([np.interp(coords, np.arange(cells), rows[r])
                          for r in range(size)])
        field += amplitude * layer
        total += amplitude
        amplitude *= 0.5
    field /= total
    return (field - field.min()) / max(field.max() - field.min(), 1e-12)


def synth_painting(rs, size):
    """A value-noise field mapped through a random palette, [1, 3, S, S]."""
    palette = rs.uniform(size=(rs.randint(3, 6), 3))
    t = _value_noise(rs, size) * (len(palette) - 1)
    low = np.floor(t).astype(int)
    high = np.minimum(low + 1, len(palette) - 1)
    frac = (t - low)[..., None]
    image = palette[low] * (1 - frac) + palette[high] * frac
    # Fine-grained stroke texture.
    image += 0.08 * (_value_noise(rs, size, octaves=6)[..., None] - 0.5)
    return image.transpose(2, 0, 1)[None]


def synth_object(rs, size):
    """A rectangle or ellipse with flat or gradient fill.

    Returns (foreground [1, 3, h, w], mask [1, 1, h, w]).
    """
    ratio = rs.uniform(MIN_FG_RATIO + 0.01, MAX_FG_RATIO - 0.02)
    aspect = rs.uniform(0.6, 1.6)
    ellipse = rs.rand() < 0.5
    area = ratio * size * size / (np.pi / 4 if ellipse else 1.0)
    h = int(round(np.sqrt(area / aspect)))
    w = int(round(np.sqrt(area * aspect)))
    h, w = max(1, min(h, size)), max(1, min(w, size))

    if ellipse:
        yy, xx = np.mgrid[0:h, 0:w]
        inside = (((yy + 0.5) / h - 0.5) ** 2 + ((xx + 0.5) / w - 0.5) ** 2) <= 0.25
        mask = inside.astype(np.float64)
    else:
        mask = np.ones((h, w))

    first = rs.uniform(size=3)
    if rs.rand() < 0.5:
        fill = np.broadcast_to(first[:, None, None], (3, h, w))
    else:
        second = rs.uniform(size=3)
        angle = rs.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
        fill = first[:, None, None] * (1 - ramp) + second[:, None, None] * ramp
    return fill[None], mask[None, None]


def _to_byte_grid(image):
    """Snaps to multiples of 1/255 so PPM round trips are exact."""
    return (netpbm.quantize(image) / np.float32(255)).astype(np.float32)


def synth_sample(rs, size, sample_id, retries=PLACEMENT_RETRIES):
    background = _to_byte_grid(synth_painting(rs, size))
    for _ in range(retries):
        foreground, mask = synth_object(rs, size)
        h, w = mask.shape[-2:]
        top = rs.randint(0, size - h + 1)
        left = rs.randint(0, size - w + 1)
        try:
            return compose(_to_byte_grid(foreground), mask, background,
                           Placement(top, left), sample_id)
        except PlacementError:
            continue
    raise PlacementError('%s: no acceptable placement after %d tries' % (
        sample_id, retries))


def synth_dataset(n, size, seed):
    """n deterministic synthetic samples of extent size x size."""
    if size < 8 or size % 8:
        raise ValueError('size must be a positive multiple of 8, got %s' % size)
    if n < 0:
        raise ValueError('n must be >= 0, got %s' % n)
    samples = []
    for i in tqdm(range(n), desc='synthesizing', unit='samples', disable=n < 64):
        rs = np.random.RandomState([seed, i])
        samples.append(synth_sample(rs, size, 'synth-%05d' % i))
    return samples


# Manifests.

def write_manifest(samples, out_dir):
    """Writes images, masks and manifest.json to out_dir; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for sample in samples:
        entry = OrderedDict([
            ('id', sample.id),
            ('composite', '%s_composite.ppm' % sample.id),
            ('mask', '%s_mask.pgm' % sample.id),
            ('background', '%s_background.ppm' % sample.id),
        ])
        netpbm.save_image(sample.composite, os.path.join(out_dir, entry['composite']))
        netpbm.save_mask(sample.fg_mask, os.path.join(out_dir, entry['mask']))
        netpbm.save_image(sample.background, os.path.join(out_dir, entry['background']))
        entries.append(entry)
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(entries, f, indent=1)
        f.write('\n')
    logging.info('Wrote %d samples to %s', len(entries), path)
    return path


def load_manifest(path):
    """Reads manifest.json; file paths are relative to its directory."""
    if not os.path.exists(path):
        raise FileNotFoundError('data manifest not found: %s' % path)
    with open(path) as f:
        try:
            entries = json.load(f)
        except ValueError as e:
            raise ValueError('%s: not valid JSON: %s' % (path, e))
    if not isinstance(entries, list):
        raise ValueError('%s: expected a JSON list' % path)
    root = os.path.dirname(path)
    samples = []
    for entry in entries:
        for key in ('id', 'composite', 'mask'):
            if key not in entry:
                raise ValueError('%s: entry %r lacks %r' % (path, entry, key))
        composite = netpbm.load_image(os.path.join(root, entry['composite']))
        mask = netpbm.load_mask(os.path.join(root, entry['mask']))
        if entry.get('background'):
            background = netpbm.load_image(os.path.join(root, entry['background']))
        else:
            background = composite
        if mask.shape[-2:] != composite.shape[-2:]:
            raise ValueError('%s: mask and composite of %s differ in size' % (
                path, entry['id']))
        samples.append(CompositeSample(composite, background, mask, entry['id']))
    return samples
