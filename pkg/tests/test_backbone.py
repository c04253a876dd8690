import numpy as np
import pytest

from backbone import Backbone, BackboneConfig, PatchLayout, dispatch, extract_patches
from errors import ConfigError, ShapeError, UnknownCameraError


def _coordinate_frames(H, W):
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    frame = np.stack([ys * 100.0 + xs, np.zeros((H, W)), np.ones((H, W))], axis=-1)
    return frame[None, None]


def test_layout_counts():
    assert PatchLayout(64, 32, 8, 8).n == 32
    overlapping = PatchLayout(64, 32, 16, 8)
    assert (overlapping.rows, overlapping.cols, overlapping.n) == (7, 3, 21)
    with pytest.raises(ShapeError):
        PatchLayout(16, 8, 12, 4)


def test_patches_are_row_major():
    layout = PatchLayout(24, 16, 8, 4)
    patches = extract_patches(_coordinate_frames(24, 16), layout)
    assert patches.shape == (1, 1, layout.n, 8 * 8 * 3)
    for i, (y, x) in enumerate(layout.window_origins()):
        block = patches[0, 0, i].reshape(8, 8, 3)
        assert block[0, 0, 0] == y * 100 + x
        assert block[7, 5, 0] == (y + 7) * 100 + x + 5
        np.testing.assert_array_equal(block[..., 2], 1.0)


def test_backbone_output_shape(rng):
    config = BackboneConfig()
    layout = PatchLayout(64, 32, config.patch, config.stride)
    backbone = Backbone(config, layout, rng)
    F = backbone(rng.uniform(0, 1, (2, config.T, 64, 32, 3)), np.array([0, 1]))
    assert F.shape == (2, config.T, 33, config.D)
    F_cls, F_patch = dispatch(F)
    assert F_cls.shape == (2, config.T, config.D)
    assert F_patch.shape == (2, config.T, 32, config.D)
    assert np.all(np.isfinite(F.values))


def test_camera_embedding_only_through_mix(rng):
    config = BackboneConfig(D=8, layers=1, heads=2, T=2, lambda_mix=1.0)
    layout = PatchLayout(32, 16, 8, 8)
    backbone = Backbone(config, layout, rng)
    frames = rng.uniform(0, 1, (1, 2, 32, 16, 3))
    np.testing.assert_allclose(backbone(frames, [0]).values, backbone(frames, [1]).values, atol=1e-12)
    backbone.config.lambda_mix = 0.5
    assert not np.allclose(backbone(frames, [0]).values, backbone(frames, [1]).values)


def test_unknown_camera_is_rejected(rng):
    config = BackboneConfig(D=8, layers=1, heads=2, T=1, num_cameras=2)
    backbone = Backbone(config, PatchLayout(16, 16, 8, 8), rng)
    frames = np.zeros((1, 1, 16, 16, 3))
    with pytest.raises(UnknownCameraError):
        backbone(frames, [2])
    with pytest.raises(UnknownCameraError):
        backbone(frames, [-1])


def test_wrong_frame_size_is_a_shape_error(rng):
    config = BackboneConfig(D=8, layers=0, heads=2, T=1)
    backbone = Backbone(config, PatchLayout(16, 16, 8, 8), rng)
    with pytest.raises(ShapeError):
        backbone(np.zeros((1, 1, 16, 8, 3)), [0])
    with pytest.raises(ShapeError):
        backbone(np.zeros((1, 2, 16, 16, 3)), [0])


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(D=10, heads=4).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(lambda_mix=1.5).validate()
    with pytest.raises(ConfigError) as excinfo:
        BackboneConfig(joint_temporal_attention=True).validate()
    assert excinfo.value.field == "backbone.joint_temporal_attention"
