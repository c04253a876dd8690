"""
Clip-level identity pathway.

The backbone tokens of all frames are refined jointly by one encoder block,
the refined [CLS] tokens are scored by a small 2D + 1D convolutional
temporal attention, and the softmax weights pool them into one clip
feature that feeds a BNNeck prediction head.
"""
from dataclasses import dataclass

import numerics as nm
from backbone import dispatch
from errors import ConfigError
from layers import EncoderBlock, Module, PredictionHead, trunc_normal


@dataclass
class AttentionConfig:
    c_mid: int = 4
    kernel2d: int = 3
    kernel1d: int = 3

    def validate(self):
        if self.c_mid < 1:
            raise ConfigError("must be >= 1", field="attention.c_mid")
        for name in ("kernel2d", "kernel1d"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel must be odd and positive, got {k}", field=f"attention.{name}")


@dataclass
class GlobalOutput:
    f: nm.Tensor        # (B, D) pre-norm clip feature
    y: nm.Tensor        # (B, D) post-norm feature
    logits: nm.Tensor   # (B, C)
    a_raw: nm.Tensor    # (B, T)
    alpha: nm.Tensor    # (B, T)


def refine(F, block):
    """One encoder block over all T*(n+1) tokens of a clip jointly."""
    batch, T, count, D = F.shape
    return block(F.reshape(batch, T * count, D)).reshape(batch, T, count, D)


def _replicate_time(x, pad, axis):
    """Pad the temporal axis by repeating its first and last entries."""
    if pad == 0:
        return x
    length = x.shape[axis]
    first = [slice(None)] * x.ndim
    last = [slice(None)] * x.ndim
    first[axis] = slice(0, 1)
    last[axis] = slice(length - 1, length)
    head = [x[tuple(first)]] * pad
    tail = [x[tuple(last)]] * pad
    return nm.concat(head + [x] + tail, axis=axis)


class TemporalAttention(Module):
    """
    Scores the T [CLS] tokens of a clip.

    The (T, D) token map is treated as a one-channel image: a 2D convolution
    (replicate padding along T, zero padding along D) and a ReLU give c_mid
    maps, the D axis is averaged out, and a 1D temporal convolution reduces
    the c_mid channels to one raw score per frame.
    """

    def __init__(self, config, rng):
        super().__init__()
        config.validate()
        self.config = config
        k2, k1 = config.kernel2d, config.kernel1d
        self.conv2d_weight = nm.Parameter(trunc_normal((config.c_mid, 1, k2, k2), 0.1, rng))
        self.conv2d_bias = nm.Parameter(trunc_normal((config.c_mid,), 0.1, rng))
        self.conv1d_weight = nm.Parameter(trunc_normal((1, config.c_mid, k1), 0.1, rng))
        self.conv1d_bias = nm.Parameter(trunc_normal((1,), 0.1, rng))

    def __call__(self, G_cls):
        batch, T, D = G_cls.shape
        k2, k1 = self.config.kernel2d, self.config.kernel1d
        x = G_cls.reshape(batch, 1, T, D)
        x = _replicate_time(x, k2 // 2, axis=2)
        x = nm.relu(nm.conv2d(x, self.conv2d_weight, self.conv2d_bias, padding=(0, k2 // 2)))
        x = x.mean(axis=3)  # (B, c_mid, T)
        x = _replicate_time(x, k1 // 2, axis=2)
        a_raw = nm.conv1d(x, self.conv1d_weight, self.conv1d_bias).reshape(batch, T)
        return a_raw, nm.softmax(a_raw, axis=-1)


def temporal_attention(G_cls, attention):
    return attention(G_cls)


def aggregate(G_cls, alpha):
    """f_global = sum_t alpha_t * g_cls_t; (B, T, D), (B, T) -> (B, D)."""
    batch, T = alpha.shape
    return (alpha.reshape(batch, T, 1) * G_cls).sum(axis=1)


def predict(f, head):
    return head(f)


class GlobalBranch(Module):

    def __init__(self, D, heads, num_classes, attention_config, rng, mlp_ratio=4, dropout=0.0):
        super().__init__()
        self.refine_block = EncoderBlock(D, heads, rng, mlp_ratio, dropout)
        self.attention = TemporalAttention(attention_config, rng)
        self.head = PredictionHead(D, num_classes, rng)

    def __call__(self, F):
        G = refine(F, self.refine_block)
        G_cls, _ = dispatch(G)
        a_raw, alpha = temporal_attention(G_cls, self.attention)
        f = aggregate(G_cls, alpha)
        y, logits = predict(f, self.head)
        return GlobalOutput(f=f, y=y, logits=logits, a_raw=a_raw, alpha=alpha)
