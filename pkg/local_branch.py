"""
Part-aware pathway.

Patch tokens are perturbed by a temporal clip shift and shuffle (a fixed
bijection of the patch axis per frame), flattened to n rows of T*D, weighted
row-wise by each part's patch importance, and encoded together with the
flattened [CLS] tokens by one encoder block shared across parts. Each part
then has its own BNNeck head.
"""
from dataclasses import dataclass

import numpy as np

import numerics as nm
from errors import ConfigError, ShapeError
from layers import EncoderBlock, Module, PredictionHead


@dataclass
class TcssConfig:
    shift: int = 5
    groups: int = 4
    enabled: bool = True

    def validate(self, n=None):
        if self.shift < 0:
            raise ConfigError(f"must be >= 0, got {self.shift}", field="tcss.shift")
        if self.groups < 1:
            raise ConfigError(f"must be >= 1, got {self.groups}", field="tcss.groups")
        if n is not None and n % self.groups:
            raise ConfigError(f"{self.groups} groups do not divide {n} patches", field="tcss.groups")


@dataclass
class LocalOutput:
    L_cls: nm.Tensor            # (B, T*D)
    L_patch: nm.Tensor          # (B, n, T*D)
    f_parts: nm.Tensor          # (B, K, T*D) pre-norm part features
    y_parts: list               # K tensors (B, T*D)
    logits: list                # K tensors (B, C)


def shuffle_permutation(n, groups):
    """out[b*g + a] = in[a*(n/g) + b]: the channel-shuffle pattern on the patch axis."""
    if n % groups:
        raise ShapeError(f"{groups} groups do not divide {n} patches")
    return np.arange(n).reshape(groups, n // groups).T.reshape(-1)


def tcss_index(T, n, shift, groups):
    """
    Source patch index for every (frame, output position).

    Frame t is first rolled left by (t * shift) mod n, then shuffled.
    """
    perm = shuffle_permutation(n, groups)
    t = np.arange(T)[:, None]
    return (perm[None, :] + t * shift) % n


def tcss(F_patch, config):
    """(B, T, n, D) patch tokens -> (B, n, T*D) temporally ordered rows."""
    batch, T, n, D = F_patch.shape
    if config.enabled:
        config.validate(n)
        index = tcss_index(T, n, config.shift, config.groups)
        F_patch = F_patch[:, np.arange(T)[:, None], index, :]
    return F_patch.transpose(0, 2, 1, 3).reshape(batch, n, T * D)


def flatten_cls(F_cls):
    """(B, T, D) -> (B, T*D), frame-major."""
    batch, T, D = F_cls.shape
    return F_cls.reshape(batch, T * D)


def weight_patches(L_patch, importance):
    """Row i of L_patch scaled by importance[i]; importance is (B, n) or (B, K, n)."""
    importance = np.asarray(importance, dtype=L_patch.values.dtype)
    if importance.shape[-1] != L_patch.shape[1]:
        raise ShapeError(f"importance has {importance.shape[-1]} entries for {L_patch.shape[1]} patches")
    if np.any(importance < 0):
        raise ShapeError("patch importance must be nonnegative")
    if importance.ndim == 2:
        return L_patch * importance[:, :, None]
    return L_patch.reshape(L_patch.shape[0], 1, *L_patch.shape[1:]) * importance[..., None]


def kps_part_feature(L_patch, importance_k, L_cls, block):
    """
    Part feature for one part: [L_cls, p_0..p_{n-1}] through the block, [CLS] output.

    L_patch (B, n, TD), importance_k (B, n), L_cls (B, TD) -> (B, TD).
    """
    batch, n, width = L_patch.shape
    p_k = weight_patches(L_patch, importance_k)
    sequence = nm.concat([L_cls.reshape(batch, 1, width), p_k], axis=1)
    return block(sequence)[:, 0, :]


class LocalBranch(Module):

    def __init__(self, width, heads, num_classes, num_parts, tcss_config, rng, mlp_ratio=4, dropout=0.0):
        super().__init__()
        if num_parts < 1:
            raise ConfigError("at least one part is required", field="parts.groups")
        self.tcss_config = tcss_config
        self.num_parts = num_parts
        self.kps_block = EncoderBlock(width, heads, rng, mlp_ratio, dropout)
        self.heads = [PredictionHead(width, num_classes, rng) for _ in range(num_parts)]

    def __call__(self, F_cls, F_patch, importance):
        """importance: (B, K, n) clip-level part importance."""
        importance = np.asarray(importance)
        batch, K, n = importance.shape
        if K != self.num_parts:
            raise ShapeError(f"importance has {K} parts, the branch has {self.num_parts}")
        L_cls = flatten_cls(F_cls)
        L_patch = tcss(F_patch, self.tcss_config)
        width = L_patch.shape[-1]
        # every part runs through the shared block in one batched call
        weighted = weight_patches(L_patch, importance).reshape(batch * K, n, width)
        cls_rows = nm.concat([L_cls.reshape(batch, 1, 1, width)] * K, axis=1).reshape(batch * K, 1, width)
        encoded = self.kps_block(nm.concat([cls_rows, weighted], axis=1))
        f_parts = encoded[:, 0, :].reshape(batch, K, width)
        y_parts, logits = [], []
        for k, head in enumerate(self.heads):
            y, z = head(f_parts[:, k, :])
            y_parts.append(y)
            logits.append(z)
        return LocalOutput(L_cls=L_cls, L_patch=L_patch, f_parts=f_parts, y_parts=y_parts, logits=logits)


def local_forward(F_cls, F_patch, importance, branch):
    return branch(F_cls, F_patch, importance)
