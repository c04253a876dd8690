"""
The full re-identification network: shared backbone, clip-level global
branch and keypoint-guided local branch, assembled from a RunConfig.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from backbone import Backbone, PatchLayout, dispatch
from errors import ConfigError, ShapeError
from global_branch import GlobalBranch
from layers import Module
from local_branch import LocalBranch
from pose_parts import PartGrouping, part_importance, stripe_importance

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    global_out: object = None   # GlobalOutput, None when the branch is ablated
    local_out: object = None    # LocalOutput, None when the branch is ablated


class KeyReId(Module):

    def __init__(self, run_config, num_classes, num_cameras, seed):
        super().__init__()
        flags = run_config.train
        if flags.no_global and flags.no_local:
            raise ConfigError("no_global and no_local together leave nothing to train", field="train.ablate")
        if num_classes < 2:
            raise ConfigError(f"training needs at least two identities, found {num_classes}", field="data")
        rng = np.random.default_rng(seed)
        data, bb = run_config.data, run_config.backbone
        self.layout = PatchLayout(data.height, data.width, bb.patch, bb.stride)
        self.grouping = PartGrouping.from_config(run_config.parts)
        self.sigma = run_config.parts.sigma_for(data.height)
        self.conf_threshold = run_config.parts.conf_threshold
        self.use_kps = not flags.no_kps
        self.T = bb.T
        self.D = bb.D

        self.backbone = Backbone(replace(bb, num_cameras=num_cameras), self.layout, rng)
        self.global_branch = None
        self.local_branch = None
        if not flags.no_global:
            self.global_branch = GlobalBranch(bb.D, bb.heads, num_classes, run_config.attention, rng,
                                              bb.mlp_ratio, bb.dropout)
        if not flags.no_local:
            tcss_config = replace(run_config.tcss, enabled=run_config.tcss.enabled and not flags.no_tcss)
            tcss_config.validate(self.layout.n)
            self.local_branch = LocalBranch(bb.T * bb.D, bb.heads, num_classes, self.grouping.K,
                                            tcss_config, rng, bb.mlp_ratio, bb.dropout)
        logger.info("model: %d parameters, %d patches per frame, K=%d parts, descriptor width %d",
                    sum(p.size for p in self.parameters()), self.layout.n, self.grouping.K,
                    self.descriptor_width)

    @property
    def descriptor_width(self):
        width = self.D if self.global_branch is not None else 0
        if self.local_branch is not None:
            width += self.grouping.K * self.T * self.D
        return width

    def clip_importance(self, keypoints):
        """(T, J, 3) clip keypoints -> (K, n) part importance; uniform stripes without keypoint guidance."""
        if not self.use_kps:
            return stripe_importance(self.grouping.K, self.layout)
        keypoints = np.asarray(keypoints, dtype=np.float64)
        return part_importance(keypoints, self.layout, self.grouping, self.sigma, self.conf_threshold).clip_level

    def __call__(self, frames, camera_ids, importance=None):
        """
        Args:
            frames: (B, T, H, W, 3) clip frames.
            camera_ids: (B,) dense camera indices.
            importance: (B, K, n) clip-level part importance; needed unless
                the local branch is ablated.
        """
        frames = np.asarray(frames)
        if frames.ndim != 5 or frames.shape[1] != self.T:
            raise ShapeError(f"expected (B, {self.T}, H, W, 3) frames, got {frames.shape}")
        F = self.backbone(frames, camera_ids)
        out = ModelOutput()
        if self.global_branch is not None:
            out.global_out = self.global_branch(F)
        if self.local_branch is not None:
            if importance is None:
                raise ShapeError("the local branch needs part importance")
            F_cls, F_patch = dispatch(F)
            out.local_out = self.local_branch(F_cls, F_patch, importance)
        return out

    def descriptor(self, out):
        """Post-norm global feature followed by the K post-norm part features, (B, width)."""
        pieces = []
        if out.global_out is not None:
            pieces.append(out.global_out.y.values)
        if out.local_out is not None:
            pieces.extend(y.values for y in out.local_out.y_parts)
        return np.concatenate(pieces, axis=-1)


def build_model(run_config, num_classes, num_cameras, seed):
    return KeyReId(run_config, num_classes, num_cameras, seed)


def parameter_groups(model):
    """Split parameters into (decayed, not decayed): matrices and kernels decay, the rest does not."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if p.ndim >= 2 and leaf in ("weight", "conv2d_weight", "conv1d_weight"):
            decay.append((name, p))
        else:
            no_decay.append((name, p))
    return decay, no_decay

