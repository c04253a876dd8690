"""
Keypoints -> joint Gaussian heatmaps -> part heatmaps -> patch-grid importance.

Keypoints follow the COCO-17 order. Each joint becomes a peak-normalised
Gaussian scaled by its confidence, parts average their joints, and part maps
are average-pooled over the backbone's patch windows so every patch gets one
importance value per part.
"""
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ShapeError

COCO_JOINTS = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]
COCO_FLIP = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15]

DEFAULT_PART_NAMES = ["head", "torso", "left_arm", "right_arm", "left_leg", "right_leg"]
DEFAULT_GROUPS = [
    [0, 1, 2, 3, 4],
    [5, 6, 11, 12],
    [5, 7, 9],
    [6, 8, 10],
    [11, 13, 15],
    [12, 14, 16],
]


@dataclass
class PartsConfig:
    groups: list = field(default_factory=lambda: [list(g) for g in DEFAULT_GROUPS])
    names: list = field(default_factory=lambda: list(DEFAULT_PART_NAMES))
    num_joints: int = 17
    left_right_swap: list = field(default_factory=lambda: list(COCO_FLIP))
    sigma: float = 0.0  # 0 selects H / 42
    conf_threshold: float = 0.05

    def sigma_for(self, height):
        return self.sigma if self.sigma > 0 else height / 42.0


@dataclass
class PartGrouping:
    groups: list
    left_right_swap: list
    num_joints: int = 17
    names: list = None

    def __post_init__(self):
        self.groups = [sorted(int(j) for j in g) for g in self.groups]
        self.left_right_swap = [int(j) for j in self.left_right_swap]
        if not self.groups:
            raise ConfigError("at least one part is required", field="parts.groups")
        for k, group in enumerate(self.groups):
            if not group:
                raise ConfigError(f"part {k} has no joints", field="parts.groups")
            if min(group) < 0 or max(group) >= self.num_joints:
                raise ConfigError(f"part {k} references a joint outside 0..{self.num_joints - 1}",
                                  field="parts.groups")
        swap = self.left_right_swap
        if sorted(swap) != list(range(self.num_joints)) or any(swap[swap[j]] != j for j in range(self.num_joints)):
            raise ConfigError("left/right swap must be a self-inverse permutation of the joints",
                              field="parts.left_right_swap")
        if self.names is None or len(self.names) != len(self.groups):
            self.names = [f"part{k}" for k in range(len(self.groups))]

    @property
    def K(self):
        return len(self.groups)

    @classmethod
    def from_config(cls, config):
        return cls(groups=config.groups, left_right_swap=config.left_right_swap,
                   num_joints=config.num_joints, names=list(config.names))

    def part_swap(self):
        """Part permutation induced by the joint swap (left arm <-> right arm, ...)."""
        lookup = {tuple(g): k for k, g in enumerate(self.groups)}
        result = []
        for group in self.groups:
            mirrored = tuple(sorted(self.left_right_swap[j] for j in group))
            if mirrored not in lookup:
                raise ConfigError("grouping is not closed under the left/right swap", field="parts.groups")
            result.append(lookup[mirrored])
        return result


@dataclass
class PartImportance:
    per_frame: np.ndarray  # (T, K, n)
    clip_level: np.ndarray  # (K, n)


def _check_finite_joints(joints):
    if not np.all(np.isfinite(np.asarray(joints, dtype=np.float64)[..., :2])):
        raise ShapeError("keypoint coordinates must be finite")


def joint_heatmap(joint, H, W, sigma, conf_threshold=0.05):
    """
    h(u, v) = confidence * exp(-((u - x)^2 + (v - y)^2) / (2 sigma^2)) on an H x W grid.

    u runs along columns (x), v along rows (y). Joints below the confidence
    threshold give an all-zero map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, y, confidence = (float(v) for v in joint)
    _check_finite_joints([x, y])
    if confidence < conf_threshold:
        return np.zeros((H, W))
    u = np.arange(W, dtype=np.float64)
    v = np.arange(H, dtype=np.float64)
    gx = np.exp(-((u - x) ** 2) / (2.0 * sigma ** 2))
    gy = np.exp(-((v - y) ** 2) / (2.0 * sigma ** 2))
    return confidence * np.outer(gy, gx)


def joint_heatmaps(keypoints, H, W, sigma, conf_threshold=0.05):
    """All J joint maps of one frame, (J, 3) keypoints -> (J, H, W)."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    _check_finite_joints(keypoints)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    u = np.arange(W, dtype=np.float64)
    v = np.arange(H, dtype=np.float64)
    gx = np.exp(-((u[None, :] - keypoints[:, 0:1]) ** 2) / (2.0 * sigma ** 2))
    gy = np.exp(-((v[None, :] - keypoints[:, 1:2]) ** 2) / (2.0 * sigma ** 2))
    conf = np.where(keypoints[:, 2] < conf_threshold, 0.0, keypoints[:, 2])
    return conf[:, None, None] * gy[:, :, None] * gx[:, None, :]


def part_heatmaps(joint_maps, grouping):
    """map_k = mean of the joint maps in group k; (J, H, W) -> (K, H, W)."""
    joint_maps = np.asarray(joint_maps, dtype=np.float64)
    if joint_maps.shape[0] != grouping.num_joints:
        raise ShapeError(f"{joint_maps.shape[0]} joint maps for a {grouping.num_joints}-joint grouping")
    return np.stack([joint_maps[group].sum(axis=0) / len(group) for group in grouping.groups])


def pool_to_patch_grid(part_map, layout):
    """Mean of the map over every P x P patch window; (..., H, W) -> (..., n)."""
    part_map = np.asarray(part_map, dtype=np.float64)
    H, W = part_map.shape[-2:]
    if layout.H > H or layout.W > W:
        raise ShapeError(f"layout {layout.H}x{layout.W} is larger than the {H}x{W} map")
    P, s = layout.P, layout.s
    windows = np.lib.stride_tricks.sliding_window_view(part_map, (P, P), axis=(-2, -1))
    windows = windows[..., :(layout.rows - 1) * s + 1:s, :(layout.cols - 1) * s + 1:s, :, :]
    pooled = windows.mean(axis=(-2, -1))
    return pooled.reshape(pooled.shape[:-2] + (layout.n,))


def clip_importance(per_frame):
    """Average the (T, K, n) per-frame importance over T."""
    per_frame = np.asarray(per_frame, dtype=np.float64)
    if per_frame.ndim != 3 or per_frame.shape[0] < 1:
        raise ShapeError(f"expected (T, K, n) importance with T >= 1, got {per_frame.shape}")
    return per_frame.mean(axis=0)


def part_importance(keypoints, layout, grouping, sigma, conf_threshold=0.05):
    """(T, J, 3) clip keypoints -> PartImportance over the layout's patch grid."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    per_frame = []
    for frame_keypoints in keypoints:
        joints = joint_heatmaps(frame_keypoints, layout.H, layout.W, sigma, conf_threshold)
        per_frame.append(pool_to_patch_grid(part_heatmaps(joints, grouping), layout))
    per_frame = np.stack(per_frame)
    return PartImportance(per_frame=per_frame, clip_level=clip_importance(per_frame))


def stripe_importance(K, layout):
    """
    K horizontal stripes over the patch rows, one-hot per stripe.

    Stand-in for keypoint guidance when it is ablated; rows are split as
    evenly as possible, earlier stripes taking the remainder.
    """
    masks = np.zeros((K, layout.rows, layout.cols))
    for k, rows in enumerate(np.array_split(np.arange(layout.rows), K)):
        masks[k, rows, :] = 1.0
    return masks.reshape(K, layout.n)
