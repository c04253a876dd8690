"""
Dense tensors with reverse-mode differentiation over a dynamic graph.

Every operation records its parents and a closure mapping the output
gradient to one gradient per parent; `Tensor.backward` walks the graph in
reverse topological order. Leaves that require gradients accumulate into
`.grad` across passes until `zero_grad` is called.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from errors import NonDeterministicError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_default_dtype(name):
    """Select the precision of newly created tensors ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class Tensor:

    def __init__(self, values, requires_grad=False, name=None, parents=(), backward_fn=None, dtype=None):
        self.values = np.ascontiguousarray(np.asarray(values, dtype=dtype or _default_dtype))
        self.grad = None
        self.name = name
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Back-propagate from this tensor; a scalar output seeds with 1."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.values.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.values.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, values, name=None, dtype=None):
        super().__init__(values, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result(values, parents, backward_fn):
    values = np.asarray(values)
    return Tensor(values, parents=parents, backward_fn=backward_fn, dtype=values.dtype)


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.values * b.values, (a, b),
                   lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.values, a.shape),
                              _unbroadcast(-g * out / b.values, b.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _result(x.values * c, (x,), lambda g: (g * c,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.values), (x,), lambda g: (g / x.values,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.values)

    def backward(g):
        # the derivative at 0 is taken as 0
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)
    return _result(out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def gelu(x):
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.values / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.values ** 2) / np.sqrt(2.0 * np.pi)
    return _result(x.values * cdf, (x,), lambda g: (g * (cdf + x.values * pdf),))


def dropout(x, rate, rng, training=True):
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.values.dtype) / (1.0 - rate)
    return _result(x.values * keep, (x,), lambda g: (g * keep,))


# linear algebra and reductions

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(np.matmul(a.values, b.values), (a, b), backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(out), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def norm(x, axis=-1, keepdims=False):
    """Euclidean norm along `axis`; the gradient at the origin is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt((x.values ** 2).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * x.values / safe, 0.0),)
    values = out if keepdims else np.squeeze(out, axis=axis)
    return _result(np.asarray(values), (x,), backward)


# shape manipulation

def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index):
    """Slicing and integer-array gathering; repeated indices accumulate gradient."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)
    return _result(np.array(x.values[index]), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# normalisation

def softmax(x, axis=-1):
    x = as_tensor(x)
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError(f"softmax received non-finite input (shape {x.shape})")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError(f"log_softmax received non-finite input (shape {x.shape})")
    out = x.values - special.logsumexp(x.values, axis=axis, keepdims=True)
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply the affine pair."""
    x = as_tensor(x)
    centered = x - reduce_mean(x, axis=-1, keepdims=True)
    var = reduce_mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """
    Batch normalisation over axis 0 of a (B, d) input.

    In training mode the batch statistics are used and the running buffers
    (numpy arrays) are updated in place; in eval mode the running buffers
    make it a fixed affine map.
    """
    x = as_tensor(x)
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch normalisation in training mode needs at least 2 samples")
        mean = reduce_mean(x, axis=0, keepdims=True)
        centered = x - mean
        var = reduce_mean(centered * centered, axis=0, keepdims=True)
        batch = x.shape[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.values.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.values.reshape(-1) * batch / (batch - 1)
        return centered / sqrt(var + eps) * gamma + beta
    inv = 1.0 / np.sqrt(running_var + eps)
    return (x - running_mean) * inv * gamma + beta


# convolutions (stride 1, zero padding)

def conv2d(x, weight, bias=None, padding=(0, 0)):
    """x: (N, C, H, W); weight: (O, C, kh, kw); bias: (O,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shapes incompatible: input {x.shape}, weight {weight.shape}")
    ph, pw = padding
    kh, kw = weight.shape[2:]
    padded = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, weight.values, optimize=True)
    out_h, out_w = out.shape[2:]

    def backward(g):
        gw = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                    "nohw,oc->nchw", g, weight.values[:, :, i, j], optimize=True)
        gx = gpad[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return gx, gw

    result = _result(out, (x, weight), backward)
    if bias is not None:
        result = add(result, reshape(bias, (1, -1, 1, 1)))
    return result


def conv1d(x, weight, bias=None, padding=0):
    """x: (N, C, L); weight: (O, C, k); bias: (O,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d shapes incompatible: input {x.shape}, weight {weight.shape}")
    k = weight.shape[2]
    padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=2)
    out = np.einsum("nclk,ock->nol", windows, weight.values, optimize=True)
    out_l = out.shape[2]

    def backward(g):
        gw = np.einsum("nclk,nol->ock", windows, g, optimize=True)
        gpad = np.zeros_like(padded)
        for i in range(k):
            gpad[:, :, i:i + out_l] += np.einsum("nol,oc->ncl", g, weight.values[:, :, i], optimize=True)
        return gpad[:, :, padding:padding + x.shape[2]], gw

    result = _result(out, (x, weight), backward)
    if bias is not None:
        result = add(result, reshape(bias, (1, -1, 1)))
    return result


# finite-difference oracle

@dataclass
class GradReport:
    max_abs_error: float
    max_rel_error: float
    per_parameter: list = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _scalar(value):
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ShapeError(f"gradient_check needs a scalar function, got shape {value.shape}")
        return float(value.values.reshape(-1)[0])
    return float(value)


def gradient_check(scalar_function, parameters, epsilon=1e-5, tolerance=1e-6, max_coords=64, seed=0, floor=1e-8):
    """
    Compare reverse-mode gradients with central finite differences.

    `parameters` is a mapping or an iterable of (name, Parameter). Parameters
    with more than `max_coords` entries are checked on a seeded subsample
    of coordinates. The relative error uses max(|analytic|, |numeric|, floor)
    as denominator.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    params = list(parameters.items()) if isinstance(parameters, dict) else list(parameters)

    first, second = _scalar(scalar_function()), _scalar(scalar_function())
    if first != second:
        raise NonDeterministicError(
            f"scalar function is not deterministic: two evaluations gave {first!r} and {second!r}")

    for _, p in params:
        p.zero_grad()
    out = scalar_function()
    if isinstance(out, Tensor):
        out.backward()
    analytic = {name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy()) for name, p in params}

    rng = np.random.default_rng(seed)
    report = GradReport(max_abs_error=0.0, max_rel_error=0.0, tolerance=tolerance)
    for name, p in params:
        flat = p.values.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        grad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            original = flat[c]
            flat[c] = original + epsilon
            f_plus = _scalar(scalar_function())
            flat[c] = original - epsilon
            f_minus = _scalar(scalar_function())
            flat[c] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            abs_err = abs(grad_flat[c] - numeric)
            rel_err = abs_err / max(abs(grad_flat[c]), abs(numeric), floor)
            report.max_abs_error = max(report.max_abs_error, float(abs_err))
            worst = max(worst, float(rel_err))
        report.per_parameter.append((name, worst))
        report.max_rel_error = max(report.max_rel_error, worst)
    logger.debug("gradient check: max rel error %.3e over %d parameters", report.max_rel_error, len(params))
    return report
