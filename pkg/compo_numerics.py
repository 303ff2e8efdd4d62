"""compo_numerics - dense tensor numerics with a reverse-mode tape for compo

A small op set over numpy arrays: linear maps, masked softmax attention with
per-key (or per-value) gains, layer normalization, sigmoid / GELU / SiLU,
gather, concat and reductions.  Every op that runs while a Tape is active and
touches a tensor that requires a gradient is recorded as (inputs, output,
vjp) so Tape.backward() can walk the records in reverse.

Routing decisions and top-k index selection never enter the tape: callers
compute them from .value arrays and feed them back as constant indices.


Requirements
------------
numpy : array storage and math.
threading : the active tape stack is per thread.
compo_errors : NumericsError.

Classes
-------
Tensor : an array plus an optional gradient.
Tape : records ops for reverse-mode differentiation.
ParamStore : named parameters and their gradients.
ParamScope : a prefixed view of a ParamStore.

Functions
---------
attention(q, k, v, ...) : masked, gain-weighted softmax attention.
grad_check(loss_fn, params, eps) : autodiff vs central finite differences.
"""

import math
import threading
import numpy as np
from compo_errors import NumericsError

_state = threading.local()


def _tapes():
    if not hasattr(_state, 'tapes'):
        _state.tapes = []
    return _state.tapes


def recording():
    """True while a Tape is active on this thread."""
    return bool(_tapes())


class Tape(object):
    """Context manager.  Ops run inside the block are recorded on this tape
    (when any input requires a gradient)."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _tapes().pop()
        return False

    def backward(self, loss, seed=None):
        if seed is None:
            if loss.value.size != 1:
                raise NumericsError("backward() needs a scalar loss or a seed")
            seed = np.ones_like(loss.value, dtype=np.float64)
        loss.grad = np.asarray(seed, dtype=np.float64)
        for inputs, output, vjp in reversed(self.records):
            if output.grad is None:
                continue
            for x, g in zip(inputs, vjp(output.grad)):
                if g is None or not x.requires_grad:
                    continue
                if x.grad is None:
                    x.grad = np.array(g, dtype=np.float64)
                else:
                    x.grad = x.grad + g


class Tensor(object):
    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value)
        if value.dtype.kind != 'f':
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def __repr__(self):
        return "Tensor({}{})".format(
            self.shape, ", name={}".format(self.name) if self.name else "")

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(value, inputs, vjp):
    if not np.all(np.isfinite(value)):
        raise NumericsError("non-finite value produced")
    out = Tensor(value)
    tapes = _tapes()
    if tapes and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tapes[-1].records.append((inputs, out, vjp))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a):
    return np.swapaxes(a, -1, -2)


##################
# Elementwise ops #
##################

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.value + b.value, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.value - b.value, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))
    return _result(a.value * b.value, (a, b), vjp)


def sigmoid_value(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    s = sigmoid_value(x.value)

    def vjp(g):
        return (g * s * (1.0 - s),)
    return _result(s, (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU"""
    x = as_tensor(x)
    u = _GELU_C * (x.value + 0.044715 * x.value ** 3)
    t = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.value ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.value * (1.0 - t * t) * du),)
    return _result(0.5 * x.value * (1.0 + t), (x,), vjp)


def silu(x):
    x = as_tensor(x)
    return mul(x, sigmoid(x))


###############
# Linear maps #
###############

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul needs operands of rank >= 2, got {} @ {}".
                            format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError("matmul shape mismatch: {} @ {}".
                            format(a.shape, b.shape))

    def vjp(g):
        return (_unbroadcast(g @ _swap(b.value), a.shape),
                _unbroadcast(_swap(a.value) @ g, b.shape))
    return _result(a.value @ b.value, (a, b), vjp)


def linear(x, scope, name, bias=True):
    """x @ scope[name.w] (+ scope[name.b])"""
    out = matmul(x, scope[name + '.w'])
    if bias:
        out = add(out, scope[name + '.b'])
    return out


#################
# Shape / index #
#################

def reshape(x, shape):
    x = as_tensor(x)

    def vjp(g):
        return (g.reshape(x.shape),)
    return _result(x.value.reshape(shape), (x,), vjp)


def transpose(x, axes=None):
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)
    return _result(x.value.transpose(axes), (x,), vjp)


def _is_basic_index(index):
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
               for i in index)


def getitem(x, index):
    """Basic slicing or fancy gather.  Gather backward accumulates
    repeated indices."""
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def vjp(g):
        grad = np.zeros(x.shape, dtype=np.float64)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)
    return _result(np.array(x.value[index]), (x,), vjp)


def take(x, index):
    """Embedding-style lookup: x[index] with integer index arrays."""
    return getitem(x, index)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(np.concatenate([t.value for t in tensors], axis=axis),
                   tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, n, axis=axis) for n in range(len(tensors)))
    return _result(np.stack([t.value for t in tensors], axis=axis),
                   tuple(tensors), vjp)


##############
# Reductions #
##############

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return _result(np.sum(x.value, axis=axis, keepdims=keepdims,
                          dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def layernorm(x, eps=1e-6):
    """Normalize over the last axis, no affine parameters."""
    x = as_tensor(x)
    xv = x.value.astype(np.float64)
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)
    return _result(xhat, (x,), vjp)


def _masked_softmax(logits, mask):
    if mask is not None:
        mask = np.broadcast_to(mask, logits.shape)
        if np.any(~mask.any(axis=-1)):
            raise NumericsError("empty attention context")
        logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def softmax(x, axis=-1, mask=None):
    """Softmax along the last axis; masked entries get weight exactly 0."""
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        raise NumericsError("softmax only runs along the last axis")
    w = _masked_softmax(x.value.astype(np.float64), mask)

    def vjp(g):
        return (w * (g - (g * w).sum(axis=-1, keepdims=True)),)
    return _result(w, (x,), vjp)


#############
# Attention #
#############

def _check_gains(gains):
    if not np.all(np.isfinite(gains.value)) or np.any(gains.value <= 0):
        raise NumericsError("attention gains must be finite and > 0")


def attention_weights(q, k, mask=None, key_gains=None, scale=None):
    """Post-softmax weights only (no tape).  Used by tests and oracles."""
    qv, kv = as_tensor(q).value, as_tensor(k).value
    if scale is None:
        scale = 1.0 / math.sqrt(qv.shape[-1])
    if key_gains is not None:
        kv = kv * as_tensor(key_gains).value[..., None]
    logits = scale * (qv.astype(np.float64) @ _swap(kv).astype(np.float64))
    return _masked_softmax(logits, mask)


def attention(q, k, v, mask=None, key_gains=None, value_gains=None,
              scale=None):
    """softmax(scale * q (g_k * k)^T, masked) @ (g_v * v)

    q : [..., nq, d], k and v : [..., nk, d], mask : bool broadcastable to
    [..., nq, nk] (True = attend), key_gains / value_gains : [..., nk].
    Softmax and its reductions run in float64.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    for t in (q, k, v):
        if not np.all(np.isfinite(t.value)):
            raise NumericsError("non-finite attention input")
    if k.shape[-1] != q.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise NumericsError("attention shape mismatch: q {} k {} v {}".
                            format(q.shape, k.shape, v.shape))
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])

    inputs = [q, k, v]
    kv = k.value
    if key_gains is not None:
        key_gains = as_tensor(key_gains)
        _check_gains(key_gains)
        kv = kv * key_gains.value[..., None]
        inputs.append(key_gains)
    vv = v.value
    if value_gains is not None:
        value_gains = as_tensor(value_gains)
        _check_gains(value_gains)
        vv = vv * value_gains.value[..., None]
        inputs.append(value_gains)

    logits = scale * (q.value.astype(np.float64) @
                      _swap(kv).astype(np.float64))
    w = _masked_softmax(logits, mask)
    out = w @ vv

    def vjp(g):
        d_vv = _swap(w) @ g
        d_w = g @ _swap(vv)
        d_logits = w * (d_w - (d_w * w).sum(axis=-1, keepdims=True))
        d_q = scale * (d_logits @ kv)
        d_kv = scale * (_swap(d_logits) @ q.value)
        grads = [_unbroadcast(d_q, q.shape)]
        if key_gains is not None:
            grads.append(_unbroadcast(d_kv * key_gains.value[..., None],
                                      k.shape))
        else:
            grads.append(_unbroadcast(d_kv, k.shape))
        if value_gains is not None:
            grads.append(_unbroadcast(d_vv * value_gains.value[..., None],
                                      v.shape))
        else:
            grads.append(_unbroadcast(d_vv, v.shape))
        if key_gains is not None:
            grads.append(_unbroadcast((d_kv * k.value).sum(axis=-1),
                                      key_gains.shape))
        if value_gains is not None:
            grads.append(_unbroadcast((d_vv * v.value).sum(axis=-1),
                                      value_gains.shape))
        return tuple(grads)
    return _result(out, tuple(inputs), vjp)


def split_heads(x, heads):
    """[..., T, D] -> [..., heads, T, D/heads]"""
    *lead, length, width = x.shape
    if width % heads:
        raise NumericsError("width {} not divisible by {} heads".
                            format(width, heads))
    x = reshape(x, tuple(lead) + (length, heads, width // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead),
                                      len(lead) + 2)
    return transpose(x, axes)


def merge_heads(x):
    """[..., heads, T, dh] -> [..., T, heads * dh]"""
    *lead, heads, length, head_width = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead),
                                      len(lead) + 2)
    x = transpose(x, axes)
    return reshape(x, tuple(lead) + (length, heads * head_width))


##############
# Parameters #
##############

class ParamStore(object):
    def __init__(self):
        self.params = {}

    def add(self, name, value):
        if name in self.params:
            raise NumericsError("duplicate parameter name: {}".format(name))
        tensor = Tensor(np.ascontiguousarray(value, dtype=np.float64),
                        requires_grad=True, name=name)
        self.params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_elements(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def grads(self):
        return {name: (tensor.grad if tensor.grad is not None
                       else np.zeros_like(tensor.value))
                for name, tensor in self.params.items()}

    def scope(self, prefix):
        return ParamScope(self, prefix)

    def copy(self):
        other = ParamStore()
        for name, tensor in self.params.items():
            other.add(name, tensor.value.copy())
        return other


class ParamScope(object):
    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def _full(self, name):
        return "{}.{}".format(self.prefix, name) if self.prefix else name

    def __getitem__(self, name):
        return self.store[self._full(name)]

    def __contains__(self, name):
        return self._full(name) in self.store

    def add(self, name, value):
        return self.store.add(self._full(name), value)

    def scope(self, sub):
        return ParamScope(self.store, self._full(sub))


def init_linear(scope, name, fan_in, fan_out, rng, bias=True, zero=False):
    if zero:
        scope.add(name + '.w', np.zeros((fan_in, fan_out)))
    else:
        scope.add(name + '.w',
                  rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                             size=(fan_in, fan_out)))
    if bias:
        scope.add(name + '.b', np.zeros(fan_out))


###################
# Gradient checks #
###################

def _loss_value(loss):
    value = float(np.asarray(as_tensor(loss).value).reshape(-1)[0])
    if not math.isfinite(value):
        raise NumericsError("non-finite loss in gradient check")
    return value


def grad_errors(loss_fn, params, eps=1e-6, max_elements=None, rng=None):
    """Per-parameter worst elementwise relative error between reverse-mode
    and central finite-difference gradients:
    max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)

    max_elements limits the checked entries per parameter (random subset
    drawn from rng)."""
    if not 1e-7 <= eps <= 1e-3:
        raise NumericsError("eps must lie in [1e-7, 1e-3]")
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
        _loss_value(loss)
        tape.backward(loss)
    analytic = params.grads()

    errors = {}
    for name, tensor in params.items():
        flat = tensor.value.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(rng.choice(flat.size, size=max_elements,
                                         replace=False))
        else:
            indices = np.arange(flat.size)
        numeric = np.zeros(indices.size)
        for n, index in enumerate(indices):
            original = flat[index]
            flat[index] = original + eps
            loss_plus = _loss_value(loss_fn(params))
            flat[index] = original - eps
            loss_minus = _loss_value(loss_fn(params))
            flat[index] = original
            numeric[n] = (loss_plus - loss_minus) / (2.0 * eps)
        ad = analytic[name].reshape(-1)[indices]
        relative = np.abs(ad - numeric) / \
            np.maximum(1e-8, np.abs(ad) + np.abs(numeric))
        errors[name] = float(relative.max()) if relative.size else 0.0
    return errors


def grad_check(loss_fn, params, eps=1e-6, max_elements=None, rng=None):
    errors = grad_errors(loss_fn, params, eps=eps,
                         max_elements=max_elements, rng=rng)
    return max(errors.values()) if errors else 0.0
