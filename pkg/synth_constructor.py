"""
Synthetic walking stick-figure tracklets for desk-scale runs.

Every identity is a deterministic function of (seed, id): its own part
colours and body proportions. Every camera has its own textured background.
Tracklets show the figure walking in place with a small per-frame jitter,
and the keypoints written next to the frames are the joint positions the
figure was drawn from.
"""
import logging
import os

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image, ImageDraw

from data_model import Tracklet, assemble_dataset, save_dataset
from errors import SynthError

logger = logging.getLogger(__name__)

MIN_HEIGHT = 32
MIN_WIDTH = 16
GOLDEN = 0.6180339887498949

HEAD, TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(6)

# part whose colour each COCO joint is drawn in
JOINT_OWNER = [HEAD, HEAD, HEAD, HEAD, HEAD,
               LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM,
               TORSO, TORSO,
               LEFT_LEG, RIGHT_LEG, LEFT_LEG, RIGHT_LEG]

# stamping order; later parts win where joint dots overlap
_STAMP_ORDER = [LEFT_LEG, RIGHT_LEG, TORSO, LEFT_ARM, RIGHT_ARM, HEAD]


def identity_appearance(person_id, seed):
    """
    Part colours (6, 3) as uint8 and body proportions of one identity.

    Hues are spread along the golden-ratio sequence so neighbouring ids
    look different; saturation and value stay high to stand out from the
    darker camera backgrounds.
    """
    rng = np.random.default_rng([seed, person_id])
    base = (0.137 * seed + GOLDEN * person_id) % 1.0
    offsets = np.array([0.0, 0.5, 0.22, 0.28, 0.72, 0.78])
    hsv = np.column_stack([(base + offsets) % 1.0,
                           rng.uniform(0.55, 0.95, 6),
                           rng.uniform(0.75, 1.0, 6)])
    colors = np.round(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)
    proportions = {
        "height": rng.uniform(0.88, 1.0),
        "shoulder": rng.uniform(0.16, 0.22),
        "hip": rng.uniform(0.09, 0.13),
        "limb": rng.uniform(0.08, 0.11),
        "arm_swing": rng.uniform(0.02, 0.05),
        "leg_swing": rng.uniform(0.02, 0.05),
    }
    return colors, proportions


def camera_background(camera, seed, H, W):
    """Static (H, W, 3) background of one camera, values in [0, 0.55]."""
    rng = np.random.default_rng([seed, 10000 + camera])
    base = rng.uniform(0.05, 0.4, 3)
    ramp = np.linspace(-0.5, 0.5, H)[:, None, None] * rng.uniform(-0.15, 0.15, 3)
    texture = rng.normal(0.0, 0.03, (H, W, 3))
    return np.clip(base + ramp + texture, 0.0, 0.55)


def figure_joints(proportions, H, W, center_x, swing, offset):
    """(17, 2) integer pixel positions of a front-facing figure, clamped into the image."""
    top = 0.04 * H + offset[1]
    fh = 0.92 * H * proportions["height"]
    cx = center_x + offset[0]
    head_r = max(2.0, 0.07 * fh)
    eye = min(0.04 * W, head_r - 1)
    ear = min(0.07 * W, head_r - 1)
    sh = proportions["shoulder"] * W
    hh = max(proportions["hip"] * W, 2.0)
    # arms swing sideways, never inward past the shoulders
    arm_l = proportions["arm_swing"] * W * (1.0 + swing)
    arm_r = proportions["arm_swing"] * W * (1.0 - swing)
    # seen from the front a stride shows as one foot lifted
    lift_l = proportions["leg_swing"] * H * max(swing, 0.0)
    lift_r = proportions["leg_swing"] * H * max(-swing, 0.0)
    joints = np.array([
        (cx, top + 0.08 * fh),                           # nose
        (cx + eye, top + 0.06 * fh),                     # left eye
        (cx - eye, top + 0.06 * fh),
        (cx + ear, top + 0.07 * fh),                     # left ear
        (cx - ear, top + 0.07 * fh),
        (cx + sh, top + 0.2 * fh),                       # left shoulder
        (cx - sh, top + 0.2 * fh),
        (cx + sh + 1.0 + arm_l / 2, top + 0.36 * fh),    # left elbow
        (cx - sh - 1.0 - arm_r / 2, top + 0.36 * fh),
        (cx + sh + 2.0 + arm_l, top + 0.5 * fh),         # left wrist
        (cx - sh - 2.0 - arm_r, top + 0.5 * fh),
        (cx + hh, top + 0.52 * fh),                      # left hip
        (cx - hh, top + 0.52 * fh),
        (cx + hh, top + 0.74 * fh - lift_l / 2),         # left knee
        (cx - hh, top + 0.74 * fh - lift_r / 2),
        (cx + hh, top + 0.96 * fh - lift_l),             # left ankle
        (cx - hh, top + 0.96 * fh - lift_r),
    ])
    joints = np.round(joints)
    joints[:, 0] = np.clip(joints[:, 0], 0, W - 1)
    joints[:, 1] = np.clip(joints[:, 1], 0, H - 1)
    return joints, head_r


def render_figure(background, joints, head_r, colors, limb_width):
    """Draw legs, torso, arms and head over `background`; returns uint8 (H, W, 3)."""
    im = Image.fromarray(np.round(background * 255.0).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    pt = [tuple(int(v) for v in j) for j in joints]
    color = [tuple(int(v) for v in c) for c in colors]

    draw.line([pt[11], pt[13], pt[15]], fill=color[LEFT_LEG], width=limb_width)
    draw.line([pt[12], pt[14], pt[16]], fill=color[RIGHT_LEG], width=limb_width)
    hip_l = (pt[11][0] + 1, pt[11][1] + 1)
    hip_r = (pt[12][0] - 1, pt[12][1] + 1)
    draw.polygon([pt[5], pt[6], hip_r, hip_l], fill=color[TORSO])
    draw.line([pt[5], pt[7], pt[9]], fill=color[LEFT_ARM], width=limb_width)
    draw.line([pt[6], pt[8], pt[10]], fill=color[RIGHT_ARM], width=limb_width)
    cx, cy = (pt[3][0] + pt[4][0]) / 2.0, (pt[1][1] + pt[0][1]) / 2.0
    draw.ellipse([cx - head_r, cy - head_r, cx + head_r, cy + head_r], fill=color[HEAD])

    dot = max(1, limb_width // 2)
    for part in _STAMP_ORDER:
        for j, owner in enumerate(JOINT_OWNER):
            if owner == part:
                x, y = pt[j]
                draw.ellipse([x - dot, y - dot, x + dot, y + dot], fill=color[part])
    return np.asarray(im, dtype=np.uint8)


def render_tracklet(person_id, camera, index, num_frames, H, W, seed):
    """Frames (N, H, W, 3) in [0, 1] and keypoints (N, 17, 3) of one tracklet."""
    colors, proportions = identity_appearance(person_id, seed)
    background = camera_background(camera, seed, H, W)
    rng = np.random.default_rng([seed, person_id, camera, index])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    speed = 2.0 * np.pi / 8.0 * rng.uniform(0.8, 1.2)
    center_x = W // 2 + int(rng.integers(-1, 2))
    limb_width = max(2, int(round(proportions["limb"] * W)))

    frames, keypoints = [], []
    for t in range(num_frames):
        offset = rng.integers(-1, 2, size=2)
        noisy = np.clip(background + rng.normal(0.0, 0.01, background.shape), 0.0, 1.0)
        joints, head_r = figure_joints(proportions, H, W, center_x, np.sin(phase + speed * t), offset)
        frames.append(render_figure(noisy, joints, head_r, colors, limb_width) / 255.0)
        keypoints.append(np.column_stack([joints, np.ones(len(joints))]))
    return np.stack(frames), np.stack(keypoints)


def split_for(camera, index, tracklets_per_id_cam):
    """The last tracklet of every (id, camera) is held out when there is more than one."""
    if tracklets_per_id_cam >= 2 and index == tracklets_per_id_cam - 1:
        return "query" if camera == 0 else "gallery"
    return "train"


def generate_synthetic_dataset(num_ids, cams, tracklets_per_id_cam, frames_per_tracklet, H, W, seed,
                               out_dir=None):
    """
    Build (and optionally write) a synthetic dataset.

    Args:
        num_ids, cams, tracklets_per_id_cam, frames_per_tracklet: counts, all >= 1.
        H, W: frame size; at least 32 x 16 so the figure fits.
        seed: every pixel and keypoint is a function of it.
        out_dir: when given, the dataset is written there in the manifest format.

    Returns:
        (dataset, manifest_path); manifest_path is None without out_dir.
    """
    counts = {"num_ids": num_ids, "cams": cams, "tracklets_per_id_cam": tracklets_per_id_cam,
              "frames_per_tracklet": frames_per_tracklet}
    for name, value in counts.items():
        if int(value) < 1:
            raise SynthError(f"{name} must be >= 1, got {value}")
    if H < MIN_HEIGHT or W < MIN_WIDTH:
        raise SynthError(f"a {H}x{W} image is too small for the figure (need at least {MIN_HEIGHT}x{MIN_WIDTH})")

    tracklets = []
    for person_id in range(num_ids):
        for camera in range(cams):
            for index in range(tracklets_per_id_cam):
                frames, keypoints = render_tracklet(person_id, camera, index, frames_per_tracklet, H, W, seed)
                tracklets.append(Tracklet(key=f"p{person_id:04d}_c{camera}_t{index}", person_id=person_id,
                                          camera_id=camera, frames=frames, keypoints=keypoints,
                                          split=split_for(camera, index, tracklets_per_id_cam)))
    root = os.path.abspath(out_dir) if out_dir else ""
    dataset = assemble_dataset(root, tracklets)
    logger.info("generated %d tracklets of %d ids over %d cameras (seed %d)",
                len(tracklets), num_ids, cams, seed)

    manifest_path = save_dataset(dataset, root) if out_dir else None
    return dataset, manifest_path
