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

"""Adam optimizer over named Tensor parameters."""

import collections

import numpy as np

import ptw
from tensor import ShapeError

META_ENTRY = 'adam.meta'


class AdamState(object):
    """Moments and step counter for one set of named parameters."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError('learning rate must be positive, got %s' % lr)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = collections.OrderedDict()
        self.v = collections.OrderedDict()

    def to_entries(self):
        entries = collections.OrderedDict()
        entries[META_ENTRY] = np.array([self.step], dtype=np.float32)
        for name in self.m:
            entries['adam.m.' + name] = self.m[name]
            entries['adam.v.' + name] = self.v[name]
        return entries

    @classmethod
    def from_entries(cls, entries, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        """Hyperparameters are not stored; they come from the caller's config."""
        state = cls(lr, beta1, beta2, eps)
        state.step = int(ptw.require(entries, META_ENTRY, (1,))[0])
        for key, value in entries.items():
            if key.startswith('adam.m.'):
                name = key[len('adam.m.'):]
                state.m[name] = value
                state.v[name] = ptw.require(entries, 'adam.v.' + name, value.shape)
        return state


def adam_step(params, grads, state):
    """Applies one bias-corrected Adam update in place.

    Args:
      params: mapping of name -> Tensor.
      grads: mapping of name -> array, same shapes as params.
      state: AdamState, updated in place.
    """
    for name, param in params.items():
        if name not in grads:
            raise KeyError('no gradient for parameter %s' % name)
        if np.shape(grads[name]) != param.shape:
            raise ShapeError('%s: gradient shape %s != parameter shape %s' % (
                name, np.shape(grads[name]), param.shape))
        if name in state.m and state.m[name].shape != param.shape:
            raise ShapeError('%s: optimizer moments have shape %s, parameter %s' % (
                name, state.m[name].shape, param.shape))

    state.step += 1
    t = state.step
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for name, param in params.items():
        dtype = param.dtype
        g = np.asarray(grads[name], dtype=dtype)
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = (state.beta1 * m + (1 - state.beta1) * g).astype(dtype)
        v = (state.beta2 * v + (1 - state.beta2) * g * g).astype(dtype)
        m_hat = m / dtype.type(correction1)
        v_hat = v / dtype.type(correction2)
        update = dtype.type(state.lr) * m_hat / (np.sqrt(v_hat) + dtype.type(state.eps))
        param.data = (param.data - update).astype(dtype)
        state.m[name] = m
        state.v[name] = v
    return params
