"""
Trainable building blocks on top of `numerics`.

Parameters are addressed by dot-paths built from attribute names
(`global_branch.head.bn.gamma`, `backbone.blocks.0.attn.qkv.weight`), which
is also how checkpoints name them.
"""
import numpy as np
from scipy import stats

import numerics as nm
from errors import CheckpointError, ShapeError


def trunc_normal(shape, std, rng):
    """Normal(0, std) truncated at two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


class Module:

    def __init__(self):
        self.training = True
        self.dropout_rng = None
        self._buffer_names = []

    def register_buffer(self, name, array):
        self._buffer_names.append(name)
        setattr(self, name, np.ascontiguousarray(np.asarray(array, dtype=nm.default_dtype())))

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, nm.Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_dropout_rng(self, rng):
        for m in self.modules():
            m.dropout_rng = rng

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        targets = {name: p.values for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if strict and (missing or unexpected):
            raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, target in targets.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise CheckpointError(f"{name}: shape {value.shape} does not match model shape {target.shape}")
            np.copyto(target, value.astype(target.dtype))

    def _dropout(self, x, rate):
        if rate <= 0.0 or self.dropout_rng is None:
            return x
        return nm.dropout(x, rate, self.dropout_rng, self.training)


class Linear(Module):

    def __init__(self, in_features, out_features, rng, bias=True, std=0.02):
        super().__init__()
        self.weight = nm.Parameter(trunc_normal((in_features, out_features), std, rng))
        self.bias = nm.Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x):
        out = nm.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):

    def __init__(self, dim):
        super().__init__()
        self.gamma = nm.Parameter(np.ones(dim))
        self.beta = nm.Parameter(np.zeros(dim))

    def __call__(self, x):
        return nm.layer_norm(x, self.gamma, self.beta)


class MultiHeadSelfAttention(Module):

    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embedding width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x):
        # x: (B, N, dim)
        batch, tokens, dim = x.shape
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nm.scale(q @ k.transpose(0, 1, 3, 2), self.head_dim ** -0.5)
        attn = nm.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
        return self.proj(out)


class Mlp(Module):

    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(nm.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer encoder layer over (B, N, dim) token sequences."""

    def __init__(self, dim, heads, rng, mlp_ratio=4, dropout=0.0):
        super().__init__()
        self.dropout = dropout
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x):
        x = x + self._dropout(self.attn(self.norm1(x)), self.dropout)
        return x + self._dropout(self.mlp(self.norm2(x)), self.dropout)

    def zero_residual_branches(self):
        """Make the block an exact identity map."""
        for p in (self.attn.proj.weight, self.attn.proj.bias, self.mlp.fc2.weight, self.mlp.fc2.bias):
            p.values[...] = 0.0


class BatchNorm1d(Module):

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = nm.Parameter(np.ones(dim))
        self.beta = nm.Parameter(np.zeros(dim))
        self.register_buffer("running_mean", np.zeros(dim))
        self.register_buffer("running_var", np.ones(dim))

    def __call__(self, x):
        return nm.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class PredictionHead(Module):
    """
    BNNeck head: batch-norm over the feature, then a bias-free classifier.

    Returns the post-norm feature and the logits; the pre-norm feature is
    what the metric losses see.
    """

    def __init__(self, dim, num_classes, rng):
        super().__init__()
        self.bn = BatchNorm1d(dim)
        self.classifier = Linear(dim, num_classes, rng, bias=False, std=0.001)

    def __call__(self, f):
        y = self.bn(f)
        return y, self.classifier(y)
