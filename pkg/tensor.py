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
A small dense tensor library with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 unless float64 is asked for). Operations
are only recorded while a Tape is active and at least one input requires a
gradient:

    with tensor.Tape() as tape:
        loss = tensor.sum(tensor.relu(tensor.conv2d(x, w, b, padding=1)))
    tensor.backward(loss, tape)
    w.grad  # same shape as w.data

Feature maps are laid out NCHW.  Set PROPIH_CHECK_FINITE=1 to verify that every
operation produces finite values.
"""

from collections import namedtuple
import os
import threading

import numpy as np

CHECK_FINITE = os.environ.get('PROPIH_CHECK_FINITE', '0') not in ('', '0')

_FLOAT_TYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node(namedtuple('Node', ['output', 'inputs', 'backward_fn', 'name'])):
    pass


class Tensor(object):
    # Keeps `ndarray * Tensor` from being evaluated by numpy.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_TYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __float__(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_gradient(self)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' % (
            self.shape, self.dtype, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape(object):
    """Records differentiable operations in execution order.

    Tapes nest per thread; the innermost active tape receives new nodes.
    """
    _local = threading.local()

    def __init__(self):
        self.nodes = []

    def record(self, node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *unused_exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self, 'Tapes must be exited in order'
        stack.pop()
        return False


def _tape_stack():
    if not hasattr(Tape._local, 'stack'):
        Tape._local.stack = []
    return Tape._local.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(value, np.ndarray) and \
            value.dtype.type in _FLOAT_TYPES:
        dtype = value.dtype
    return Tensor(np.asarray(value, dtype=dtype or np.float32))


def _make(data, inputs, backward_fn, name):
    out = Tensor(np.asarray(data).astype(inputs[0].dtype, copy=False))
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError('%s produced non-finite values' % name)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(Node(out, tuple(inputs), backward_fn, name))
    return out


def _unbroadcast(grad, shape):
    """Sums `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# Arithmetic.

def add(a, b):
    a, b = _binary_operands(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward_fn, 'add')


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), backward_fn, 'sub')


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), backward_fn, 'mul')


def div(a, b):
    a, b = _binary_operands(a, b)

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), backward_fn, 'div')


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), 'neg')


def power(x, exponent):
    exponent = float(exponent)

    def backward_fn(g):
        return (g * exponent * np.power(x.data, exponent - 1),)
    return _make(np.power(x.data, exponent), (x,), backward_fn, 'power')


def sqrt(x):
    """Square root; the gradient at 0 is taken as 0."""
    out_data = np.sqrt(x.data)

    def backward_fn(g):
        scale = np.zeros_like(out_data)
        np.divide(0.5, out_data, out=scale, where=out_data > 0)
        return (g * scale,)
    return _make(out_data, (x,), backward_fn, 'sqrt')


def exp(x):
    out_data = np.exp(x.data)
    return _make(out_data, (x,), lambda g: (g * out_data,), 'exp')


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), 'log')


# Nonlinearities.

def relu(x):
    """max(x, 0); the subgradient at 0 is 0."""
    active = x.data > 0
    return _make(np.where(active, x.data, 0), (x,),
                 lambda g: (g * active,), 'relu')


def sigmoid(x):
    e = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e))
    return _make(out_data, (x,),
                 lambda g: (g * out_data * (1 - out_data),), 'sigmoid')


def tanh(x):
    out_data = np.tanh(x.data)
    return _make(out_data, (x,),
                 lambda g: (g * (1 - out_data * out_data),), 'tanh')


def clip(x, low, high):
    """Clamps to [low, high]; gradient passes only inside the bounds."""
    inside = (x.data >= low) & (x.data <= high)
    return _make(np.clip(x.data, low, high), (x,),
                 lambda g: (g * inside,), 'clip')


def where(condition, a, b):
    """Selects `a` where the constant `condition` holds and `b` elsewhere."""
    a, b = _binary_operands(a, b)
    condition = np.asarray(condition, dtype=bool)

    def backward_fn(g):
        return (_unbroadcast(np.where(condition, g, 0), a.shape),
                _unbroadcast(np.where(condition, 0, g), b.shape))
    return _make(np.where(condition, a.data, b.data), (a, b),
                 backward_fn, 'where')


# Reductions and reshaping.

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # pylint: disable=redefined-builtin
    axes = _normalize_axes(axis, x.ndim)
    out_data = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out_data, (x,), backward_fn, 'sum')


def mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),), 'reshape')


def matmul(a, b):
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul: cannot multiply %s by %s' % (a.shape, b.shape))

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), backward_fn, 'matmul')


def stop_gradient(x):
    return Tensor(x.data, requires_grad=False)


# Convolution, pooling and resampling.  All NCHW.

def _require_rank4(x, op):
    if x.ndim != 4:
        raise ShapeError('%s expects an NCHW tensor, got shape %s' % (op, x.shape))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, accumulated one kernel tap at a time."""
    _require_rank4(x, 'conv2d')
    if weight.ndim != 4:
        raise ShapeError('conv2d weight must be [C_out, C_in, kh, kw], got %s' %
                         (weight.shape,))
    n, c_in, h, w = x.shape
    c_out, w_c_in, kh, kw = weight.shape
    if w_c_in != c_in:
        raise ShapeError('conv2d: input has %d channels, weight expects %d' %
                         (c_in, w_c_in))
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError('conv2d: bias shape %s does not match %d outputs' %
                         (bias.shape, c_out))
    if stride < 1 or padding < 0:
        raise ShapeError('conv2d: bad stride %d / padding %d' % (stride, padding))
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError('conv2d: %dx%d kernel does not fit %dx%d padded input' %
                         (kh, kw, hp, wp))
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def tap(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (h_out - 1) + 1, stride),
                slice(j, j + stride * (w_out - 1) + 1, stride))

    out = np.zeros((c_out, n, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(weight.data[:, :, i, j], xp[tap(i, j)],
                                axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                window = tap(i, j)
                gw[:, :, i, j] = np.tensordot(
                    g, xp[window], axes=([0, 2, 3], [0, 2, 3]))
                gxp[window] += np.tensordot(
                    weight.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward_fn, 'conv2d')


def _require_even(x, op):
    _require_rank4(x, op)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError('%s needs even spatial extents, got %dx%d' %
                         (op, x.shape[2], x.shape[3]))


def _windows2x2(data):
    n, c, h, w = data.shape
    return data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def _unwindows2x2(windows):
    n, c, h2, w2, _ = windows.shape
    return windows.reshape(n, c, h2, w2, 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)


def maxpool2x2(x):
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    element of the window in row-major order."""
    _require_even(x, 'maxpool2x2')
    windows = _windows2x2(x.data)
    winner = np.argmax(windows, axis=-1)
    out_data = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = (np.arange(4) == winner[..., None]) * g[..., None]
        return (_unwindows2x2(routed),)
    return _make(out_data, (x,), backward_fn, 'maxpool2x2')


def avgpool2x2(x):
    _require_even(x, 'avgpool2x2')
    out_data = _windows2x2(x.data).mean(axis=-1)

    def backward_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)
    return _make(out_data, (x,), backward_fn, 'avgpool2x2')


def _check_scale(scale):
    if int(scale) != scale or scale < 1:
        raise ShapeError('upsampling scale must be an integer >= 1, got %s' % scale)
    return int(scale)


def upsample_nearest(x, scale):
    _require_rank4(x, 'upsample_nearest')
    scale = _check_scale(scale)
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)
    return _make(out_data, (x,), backward_fn, 'upsample_nearest')


def bilinear_matrix(size, scale, dtype=np.float32):
    """[size*scale, size] interpolation matrix, align_corners=False."""
    out_size = size * scale
    matrix = np.zeros((out_size, size), dtype=np.float64)
    for o in range(out_size):
        src = max((o + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        matrix[o, i0] += 1.0 - frac
        matrix[o, i1] += frac
    return matrix.astype(dtype)


def upsample_bilinear(x, scale):
    _require_rank4(x, 'upsample_bilinear')
    scale = _check_scale(scale)
    rows = bilinear_matrix(x.shape[2], scale, x.dtype)
    cols = bilinear_matrix(x.shape[3], scale, x.dtype)
    out_data = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward_fn(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)
    return _make(out_data, (x,), backward_fn, 'upsample_bilinear')


def concat_channels(a, b):
    _require_rank4(a, 'concat_channels')
    _require_rank4(b, 'concat_channels')
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError('concat_channels: %s and %s differ outside channels' %
                         (a.shape, b.shape))
    split = a.shape[1]

    def backward_fn(g):
        return g[:, :split], g[:, split:]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 backward_fn, 'concat_channels')


def slice_channels(x, start, stop):
    _require_rank4(x, 'slice_channels')
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError('slice_channels: [%d, %d) outside %d channels' %
                         (start, stop, x.shape[1]))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)
    return _make(x.data[:, start:stop], (x,), backward_fn, 'slice_channels')


def global_avg_pool(x):
    """[N, C, H, W] -> [N, C] spatial mean."""
    _require_rank4(x, 'global_avg_pool')
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError('global_avg_pool over an empty map')

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return _make(x.data.mean(axis=(2, 3)), (x,), backward_fn, 'global_avg_pool')


# Reverse sweep.

def _sweep(loss, tape):
    if loss.size != 1:
        raise ShapeError('backward needs a scalar loss, got shape %s' % (loss.shape,))
    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = inp
    return grads, tensors


def backward(loss, tape):
    """Accumulates d(loss)/d(leaf) into `.grad` of every leaf requiring grad."""
    grads, tensors = _sweep(loss, tape)
    for key, g in grads.items():
        t = tensors[key]
        if not (t.is_leaf and t.requires_grad):
            continue
        t.grad = g if t.grad is None else t.grad + g


def gradients(loss, tape, wrt):
    """Returns d(loss)/d(t) for each tensor in `wrt` without touching `.grad`.

    Tensors the loss does not depend on get zeros.
    """
    grads, _ = _sweep(loss, tape)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
