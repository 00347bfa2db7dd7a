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

import os
import shutil
import tempfile
import time
import unittest

import numpy as np

import composites
import harmonet
import tensor
import utils

MICRO_WIDTH = 4
MICRO_SIZE = 16


def micro_config(**kwargs):
    """base_width 4, 16x16: the smallest network the tests run."""
    fields = dict(base_width=MICRO_WIDTH, image_size=MICRO_SIZE, gru_hidden=4)
    fields.update(kwargs)
    return harmonet.HarmonizerConfig(**fields)


def square_sample(size=MICRO_SIZE, top=4, left=4, extent=6, seed=0, sample_id='sq'):
    """A random background with a brighter square foreground pasted on it."""
    rs = np.random.RandomState(seed)
    background = rs.uniform(0.2, 0.6, size=(1, 3, size, size)).astype(np.float32)
    foreground = rs.uniform(0.5, 1.0, size=(1, 3, extent, extent)).astype(np.float32)
    mask = np.ones((1, 1, extent, extent), dtype=np.float32)
    return composites.compose(foreground, mask, background,
                              composites.Placement(top, left), sample_id)


def numeric_gradient(fn, arrays, index, position, eps=1e-6):
    """Central difference of fn at arrays[index][position], in float64."""
    def value(delta):
        perturbed = [np.array(a, dtype=np.float64) for a in arrays]
        perturbed[index][position] += delta
        return float(fn([tensor.Tensor(a) for a in perturbed]))
    return (value(eps) - value(-eps)) / (2 * eps)


class TestUtils(unittest.TestCase):
    def test_write_json_replaces_atomically(self):
        directory = tempfile.mkdtemp()
        try:
            path = os.path.join(directory, 'sub', 'report.json')
            utils.write_json({'a': 1}, path)
            utils.write_json({'a': 2}, path)
            self.assertFalse(os.path.exists(path + '.tmp'))
            with open(path) as f:
                self.assertIn('"a": 2', f.read())
        finally:
            shutil.rmtree(directory)

    def test_read_jsonl_skips_blank_lines(self):
        directory = tempfile.mkdtemp()
        try:
            path = os.path.join(directory, 'log.jsonl')
            with open(path, 'w') as f:
                utils.append_jsonl(f, {'step': 1})
                f.write('\n')
                utils.append_jsonl(f, {'step': 2})
            self.assertEqual([{'step': 1}, {'step': 2}], utils.read_jsonl(path))
        finally:
            shutil.rmtree(directory)

    def test_read_jsonl_names_bad_line(self):
        directory = tempfile.mkdtemp()
        try:
            path = os.path.join(directory, 'log.jsonl')
            with open(path, 'w') as f:
                f.write('{"step": 1}\n{oops\n')
            with self.assertRaisesRegex(ValueError, 'log.jsonl:2'):
                utils.read_jsonl(path)
        finally:
            shutil.rmtree(directory)


class PropihUnitTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.start_time = time.time()

    @classmethod
    def tearDownClass(cls):
        print("\n%s.%s: %.3f seconds" %
              (cls.__module__, cls.__name__, time.time() - cls.start_time))

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp_dir, ignore_errors=True)

    def tmp_path(self, *parts):
        return os.path.join(self.tmp_dir, *parts)

    def assertEqualNPArray(self, array1, array2):
        array1, array2 = np.asarray(array1), np.asarray(array2)
        if array1.shape != array2.shape or not np.all(array1 == array2):
            raise AssertionError(
                "Arrays differed in one or more locations:\n%s\n%s" % (array1, array2))

    def assertNotEqualNPArray(self, array1, array2):
        if np.all(np.asarray(array1) == np.asarray(array2)):
            raise AssertionError("Arrays were identical:\n%s" % array1)

    def assertAllClose(self, expected, actual, rtol=1e-5, atol=1e-6):
        expected = np.asarray(getattr(expected, 'data', expected))
        actual = np.asarray(getattr(actual, 'data', actual))
        if expected.shape != actual.shape:
            raise AssertionError('shapes differ: %s vs %s' % (expected.shape,
                                                               actual.shape))
        if not np.allclose(expected, actual, rtol=rtol, atol=atol):
            worst = np.max(np.abs(expected - actual))
            raise AssertionError('arrays differ by up to %g:\n%s\n%s' % (
                worst, expected, actual))

    def assertGradientsMatch(self, fn, arrays, probes=20, seed=0, rtol=1e-3,
                             atol=1e-4, eps=1e-6):
        """Compares float32 reverse-mode gradients of fn with central differences.

        fn maps a list of Tensors to a scalar Tensor; arrays are its inputs.
        """
        inputs = [tensor.Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)
                  for a in arrays]
        with tensor.Tape() as tape:
            loss = fn(inputs)
        grads = tensor.gradients(loss, tape, inputs)
        rs = np.random.RandomState(seed)
        for _ in range(probes):
            i = rs.randint(len(arrays))
            position = tuple(rs.randint(extent) for extent in np.shape(arrays[i]))
            analytic = float(grads[i][position])
            numeric = numeric_gradient(fn, arrays, i, position, eps)
            if abs(analytic - numeric) > atol + rtol * max(abs(analytic), abs(numeric)):
                raise AssertionError('input %d at %s: analytic %r, numeric %r' % (
                    i, position, analytic, numeric))
