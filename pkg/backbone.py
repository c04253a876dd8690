"""
Shared spatiotemporal patch encoder.

Frames are cut into overlapping P x P patches with stride s, projected to D,
prefixed with a learnable [CLS] token, mixed with a per-(frame, token)
positional embedding and a per-camera embedding, then refined by a stack of
pre-norm encoder layers that attend within each frame. The dispatcher
splits the result into the [CLS] stream and the patch stream.
"""
import logging
from dataclasses import dataclass

import numpy as np

import numerics as nm
from errors import ConfigError, ShapeError, UnknownCameraError
from layers import EncoderBlock, Linear, Module, trunc_normal

logger = logging.getLogger(__name__)


@dataclass
class PatchLayout:
    H: int
    W: int
    P: int
    s: int

    def __post_init__(self):
        if self.P < 1 or self.s < 1:
            raise ShapeError(f"patch size and stride must be >= 1, got P={self.P}, s={self.s}")
        if self.P > self.H or self.P > self.W:
            raise ShapeError(f"patch size {self.P} does not fit a {self.H}x{self.W} image")

    @property
    def rows(self):
        return (self.H - self.P) // self.s + 1

    @property
    def cols(self):
        return (self.W - self.P) // self.s + 1

    @property
    def n(self):
        return self.rows * self.cols

    def window_origins(self):
        """Top-left (y, x) pixel of every patch, row-major."""
        ys, xs = np.meshgrid(np.arange(self.rows) * self.s, np.arange(self.cols) * self.s, indexing="ij")
        return np.stack([ys.reshape(-1), xs.reshape(-1)], axis=1)


@dataclass
class BackboneConfig:
    D: int = 32
    layers: int = 2
    heads: int = 4
    lambda_mix: float = 0.5
    num_cameras: int = 2
    T: int = 4
    dropout: float = 0.0
    mlp_ratio: int = 4
    patch: int = 8
    stride: int = 8
    joint_temporal_attention: bool = False

    def validate(self):
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}", field="backbone.heads")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.lambda_mix}", field="backbone.lambda_mix")
        if self.joint_temporal_attention:
            raise ConfigError("cross-frame attention inside the backbone is not implemented",
                              field="backbone.joint_temporal_attention")
        if self.T < 1 or self.layers < 0 or self.num_cameras < 1:
            raise ConfigError("T, num_cameras must be >= 1 and layers >= 0", field="backbone")


def extract_patches(frames, layout):
    """(..., H, W, 3) images -> (..., n, P*P*3) flattened patches in row-major order."""
    frames = np.asarray(frames)
    if frames.shape[-3:-1] != (layout.H, layout.W):
        raise ShapeError(f"frames are {frames.shape[-3:-1]}, layout expects {(layout.H, layout.W)}")
    P, s = layout.P, layout.s
    windows = np.lib.stride_tricks.sliding_window_view(frames, (P, P), axis=(-3, -2))
    windows = windows[..., ::s, ::s, :, :, :][..., :layout.rows, :layout.cols, :, :, :]
    # (..., rows, cols, 3, P, P) -> (..., rows, cols, P, P, 3)
    windows = np.moveaxis(windows, -3, -1)
    lead = windows.shape[:-5]
    return windows.reshape(lead + (layout.n, P * P * 3))


def patchify_project(frames, layout, projection, cls):
    """
    Project every patch of (B, T, H, W, 3) frames to D and prepend [CLS].

    Returns the (B, T, n+1, D) token tensor.
    """
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ShapeError(f"expected (B, T, H, W, 3) frames, got shape {frames.shape}")
    batch, T = frames.shape[:2]
    patches = nm.Tensor(extract_patches(frames, layout))
    tokens = projection(patches)
    D = tokens.shape[-1]
    cls_tokens = nm.add(np.zeros((batch, T, 1, D)), cls.reshape(1, 1, 1, D))
    return nm.concat([cls_tokens, tokens], axis=2)


def add_pos_cam(tokens, pos, cam, camera_ids, lambda_mix):
    """Z + lambda * pos[t, i] + (1 - lambda) * cam[camera], camera broadcast to every token."""
    camera_ids = np.asarray(camera_ids, dtype=np.int64).reshape(-1)
    num_cameras = cam.shape[0]
    if camera_ids.size != tokens.shape[0]:
        raise ShapeError(f"{camera_ids.size} camera ids for a batch of {tokens.shape[0]}")
    bad = camera_ids[(camera_ids < 0) | (camera_ids >= num_cameras)]
    if bad.size:
        raise UnknownCameraError(f"camera id {int(bad[0])} outside the {num_cameras} embedded cameras")
    if tuple(pos.shape) != tuple(tokens.shape[1:]):
        raise ShapeError(f"positional embedding {pos.shape} does not match tokens {tokens.shape[1:]}")
    D = tokens.shape[-1]
    cam_tokens = cam[camera_ids].reshape(-1, 1, 1, D)
    return tokens + nm.scale(pos, lambda_mix) + nm.scale(cam_tokens, 1.0 - lambda_mix)


def encode(tokens, blocks):
    """Run the encoder stack independently over the (n+1) tokens of each frame."""
    batch, T, count, D = tokens.shape
    x = tokens.reshape(batch * T, count, D)
    for block in blocks:
        x = block(x)
    return x.reshape(batch, T, count, D)


def dispatch(F):
    """Split (B, T, n+1, D) into F_cls (B, T, D) and F_patch (B, T, n, D)."""
    return F[:, :, 0, :], F[:, :, 1:, :]


class Backbone(Module):

    def __init__(self, config, layout, rng):
        super().__init__()
        config.validate()
        self.config = config
        self.layout = layout
        D = config.D
        self.proj = Linear(layout.P * layout.P * 3, D, rng)
        self.cls = nm.Parameter(trunc_normal((D,), 0.02, rng))
        self.pos = nm.Parameter(trunc_normal((config.T, layout.n + 1, D), 0.02, rng))
        self.cam = nm.Parameter(trunc_normal((config.num_cameras, D), 0.02, rng))
        self.blocks = [EncoderBlock(D, config.heads, rng, config.mlp_ratio, config.dropout)
                       for _ in range(config.layers)]
        logger.debug("backbone: %d patches per frame, %d layers, D=%d", layout.n, config.layers, D)

    def __call__(self, frames, camera_ids):
        tokens = patchify_project(frames, self.layout, self.proj, self.cls)
        tokens = add_pos_cam(tokens, self.pos, self.cam, camera_ids, self.config.lambda_mix)
        return encode(tokens, self.blocks)
