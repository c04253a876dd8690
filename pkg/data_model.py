"""
Tracklets, clips and the on-disk dataset format.

A dataset is a manifest (one tab-separated record per tracklet) plus, per
tracklet, a directory of `frame_%05d.png` images and a keypoint text file
with one `frame_idx joint_idx x y confidence` line per joint per frame.
"""
import glob
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from errors import ManifestError, ShapeError
from pose_parts import COCO_FLIP

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
FRAME_PATTERN = "frame_{:05d}.png"
DEFAULT_KEYPOINT_FILE = "keypoints.txt"
MANIFEST_NAME = "manifest.tsv"


@dataclass
class Tracklet:
    key: str
    person_id: int
    camera_id: int
    frames: np.ndarray      # (N, H, W, 3) in [0, 1]
    keypoints: np.ndarray   # (N, J, 3) rows of (x, y, confidence)
    split: str = "train"
    raw_person_id: int = None
    raw_camera_id: int = None
    keypoint_file: str = DEFAULT_KEYPOINT_FILE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[-1] != 3:
            raise ShapeError(f"{self.key}: frames must be (N >= 1, H, W, 3), got {self.frames.shape}")
        if self.keypoints.ndim != 3 or self.keypoints.shape[0] != self.frames.shape[0] \
                or self.keypoints.shape[-1] != 3:
            raise ShapeError(f"{self.key}: {self.keypoints.shape[0]} keypoint frames "
                             f"for {self.frames.shape[0]} image frames")
        check_keypoints(self.keypoints, self.key)
        if self.raw_person_id is None:
            self.raw_person_id = self.person_id
        if self.raw_camera_id is None:
            self.raw_camera_id = self.camera_id

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def size(self):
        return self.frames.shape[1:3]


@dataclass
class Clip:
    frames: np.ndarray          # (T, H, W, 3)
    keypoints: np.ndarray       # (T, J, 3)
    person_id: int
    camera_id: int
    sampled_indices: np.ndarray  # (T,)
    key: str = ""


@dataclass
class ManifestEntry:
    rel_dir: str
    person_id: int
    camera_id: int
    split: str
    keypoint_file: str
    line: int = 0


@dataclass
class Dataset:
    root: str
    splits: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    id_mapping: dict = field(default_factory=dict)
    camera_mapping: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len({t.person_id for t in self.splits.get("train", [])})

    @property
    def num_cameras(self):
        return max(len(self.camera_mapping), 1)

    def tracklets(self, split):
        return self.splits.get(split, [])

    def all_tracklets(self):
        return [t for s in SPLITS for t in self.splits.get(s, [])]

    def find(self, key):
        for t in self.all_tracklets():
            if t.key == key:
                return t
        raise ManifestError(f"no tracklet {key!r} in the dataset", os.path.join(self.root, MANIFEST_NAME))


def check_keypoints(keypoints, where=""):
    if not np.all(np.isfinite(keypoints)):
        raise ShapeError(f"{where}: keypoint values must be finite")
    conf = keypoints[..., 2]
    if np.any(conf < 0) or np.any(conf > 1):
        raise ShapeError(f"{where}: keypoint confidence must lie in [0, 1]")


def read_manifest(manifest_path):
    if not os.path.isfile(manifest_path):
        raise ManifestError("manifest file does not exist", manifest_path)
    entries = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ManifestError(f"expected 5 tab-separated fields, found {len(fields)}",
                                    manifest_path, line_no)
            rel_dir, person, camera, split, keypoint_file = fields
            try:
                person_id, camera_id = int(person), int(camera)
            except ValueError:
                raise ManifestError(f"person/camera ids must be integers, got {person!r}, {camera!r}",
                                    manifest_path, line_no) from None
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}", manifest_path, line_no)
            entries.append(ManifestEntry(rel_dir, person_id, camera_id, split, keypoint_file, line_no))
    return entries


def read_keypoints(path, num_frames, num_joints=17, where=None):
    """Parse a keypoint file into (num_frames, num_joints, 3)."""
    try:
        rows = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise ManifestError(f"unreadable keypoint file: {e}", path) from None
    if rows.size and rows.shape[1] != 5:
        raise ManifestError(f"keypoint rows need 5 columns, found {rows.shape[1]}", path)
    expected = num_frames * num_joints
    if rows.shape[0] != expected:
        raise ManifestError(f"{rows.shape[0]} keypoint rows for {num_frames} frames x {num_joints} joints",
                            *(where or (path, None)))
    frame_idx = rows[:, 0].astype(np.int64)
    joint_idx = rows[:, 1].astype(np.int64)
    if np.any(frame_idx < 0) or np.any(frame_idx >= num_frames) \
            or np.any(joint_idx < 0) or np.any(joint_idx >= num_joints):
        raise ManifestError("frame or joint index out of range", *(where or (path, None)))
    keypoints = np.full((num_frames, num_joints, 3), np.nan)
    keypoints[frame_idx, joint_idx] = rows[:, 2:5]
    if np.isnan(keypoints).any():
        raise ManifestError("some (frame, joint) pairs are missing or duplicated", *(where or (path, None)))
    return keypoints


def read_frames(directory, where):
    paths = sorted(glob.glob(os.path.join(directory, "frame_*.png")))
    if not paths:
        raise ManifestError(f"no frame_*.png files in {directory}", *where)
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    if len({f.shape for f in frames}) != 1:
        raise ManifestError(f"frames in {directory} do not share one size", *where)
    return np.stack(frames)


def resize_tracklet(frames, keypoints, H, W):
    """Bilinear resize to H x W; keypoints scaled by the same factors."""
    H0, W0 = frames.shape[1:3]
    if (H0, W0) == (H, W):
        return frames, keypoints
    resized = []
    for frame in frames:
        im = Image.fromarray(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8))
        resized.append(np.asarray(im.resize((W, H), Image.BILINEAR), dtype=np.float64) / 255.0)
    keypoints = keypoints.copy()
    keypoints[..., 0] *= W / W0
    keypoints[..., 1] *= H / H0
    return np.stack(resized), keypoints


def assemble_dataset(root, tracklets):
    """Group tracklets by split and re-index their raw person/camera ids."""
    train_ids = sorted({t.raw_person_id for t in tracklets if t.split == "train"})
    other_ids = sorted({t.raw_person_id for t in tracklets} - set(train_ids))
    id_mapping = {raw: i for i, raw in enumerate(train_ids + other_ids)}
    camera_mapping = {raw: i for i, raw in enumerate(sorted({t.raw_camera_id for t in tracklets}))}
    dataset = Dataset(root=root, id_mapping=id_mapping, camera_mapping=camera_mapping)
    for tracklet in tracklets:
        tracklet.person_id = id_mapping[tracklet.raw_person_id]
        tracklet.camera_id = camera_mapping[tracklet.raw_camera_id]
        dataset.splits[tracklet.split].append(tracklet)
    return dataset


def load_dataset(manifest_path, size=None, num_joints=17):
    """
    Load every tracklet of a manifest, grouped by split.

    Train identities are re-indexed to 0..C-1 in ascending raw order, then
    the identities seen only in query/gallery; cameras are re-indexed
    densely. `size=(H, W)` resizes frames and keypoints at load.
    """
    manifest_path = os.path.abspath(manifest_path)
    root = os.path.dirname(manifest_path)
    entries = read_manifest(manifest_path)

    tracklets = []
    for entry in entries:
        where = (manifest_path, entry.line)
        directory = os.path.join(root, entry.rel_dir)
        keypoint_path = os.path.join(directory, entry.keypoint_file)
        if not os.path.isdir(directory):
            raise ManifestError(f"tracklet directory {entry.rel_dir!r} does not exist", *where)
        if not os.path.isfile(keypoint_path):
            raise ManifestError(f"keypoint file {entry.keypoint_file!r} of {entry.rel_dir!r} does not exist",
                                *where)
        frames = read_frames(directory, where)
        keypoints = read_keypoints(keypoint_path, frames.shape[0], num_joints, where)
        if size is not None:
            frames, keypoints = resize_tracklet(frames, keypoints, *size)
        try:
            tracklet = Tracklet(key=entry.rel_dir, person_id=entry.person_id,
                                camera_id=entry.camera_id, frames=frames,
                                keypoints=keypoints, split=entry.split, raw_person_id=entry.person_id,
                                raw_camera_id=entry.camera_id, keypoint_file=entry.keypoint_file)
        except ShapeError as e:
            raise ManifestError(str(e), *where) from None
        tracklets.append(tracklet)
    dataset = assemble_dataset(root, tracklets)
    logger.info("loaded %s: %s", manifest_path,
                ", ".join(f"{s}={len(dataset.splits[s])}" for s in SPLITS))
    return dataset


def save_dataset(dataset, root):
    """Write frames, keypoint files and the manifest under `root`; returns the manifest path."""
    os.makedirs(root, exist_ok=True)
    lines = []
    for tracklet in dataset.all_tracklets():
        directory = os.path.join(root, tracklet.key)
        os.makedirs(directory, exist_ok=True)
        for i, frame in enumerate(tracklet.frames):
            pixels = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(directory, FRAME_PATTERN.format(i)))
        N, J = tracklet.keypoints.shape[:2]
        frame_idx, joint_idx = np.meshgrid(np.arange(N), np.arange(J), indexing="ij")
        rows = np.column_stack([frame_idx.reshape(-1), joint_idx.reshape(-1),
                                tracklet.keypoints.reshape(-1, 3)])
        np.savetxt(os.path.join(directory, tracklet.keypoint_file), rows,
                   fmt=["%d", "%d", "%.17g", "%.17g", "%.17g"])
        lines.append("\t".join([tracklet.key, str(tracklet.raw_person_id), str(tracklet.raw_camera_id),
                                tracklet.split, tracklet.keypoint_file]))
    manifest_path = os.path.join(root, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest_path


def segment_bounds(N, T):
    """Start and length of T contiguous segments over N items, remainder to the earliest."""
    base, extra = divmod(N, T)
    lengths = np.array([base + (1 if i < extra else 0) for i in range(T)])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return starts, lengths


def sample_indices(N, T, mode, rng=None):
    """
    One frame index per segment.

    Short tracklets are padded to T by repeating the last frame; train mode
    picks a uniform frame inside each segment, inference mode the first.
    """
    if N < 1:
        raise ShapeError("cannot sample a clip from an empty tracklet")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    padded = max(N, T)
    starts, lengths = segment_bounds(padded, T)
    if mode == "train":
        picks = starts + np.array([rng.integers(0, n) for n in lengths])
    else:
        picks = starts
    return np.minimum(picks, N - 1)


def sample_clip(tracklet, T, mode, rng=None):
    indices = sample_indices(tracklet.num_frames, T, mode, rng)
    return Clip(frames=tracklet.frames[indices].copy(), keypoints=tracklet.keypoints[indices].copy(),
                person_id=tracklet.person_id, camera_id=tracklet.camera_id,
                sampled_indices=indices, key=tracklet.key)


def flip_clip(clip, swap=COCO_FLIP):
    """Mirror every frame; x -> W - 1 - x and left/right joints exchanged."""
    W = clip.frames.shape[2]
    keypoints = clip.keypoints[:, list(swap), :].copy()
    keypoints[..., 0] = (W - 1) - keypoints[..., 0]
    return replace(clip, frames=clip.frames[:, :, ::-1, :].copy(), keypoints=keypoints)


def random_erase(frame, rng, area_range=(0.02, 0.2), aspect_range=(0.3, 3.3), attempts=100):
    """Replace one random rectangle of the frame with uniform noise."""
    H, W = frame.shape[:2]
    frame = frame.copy()
    for _ in range(attempts):
        area = rng.uniform(*area_range) * H * W
        aspect = np.exp(rng.uniform(np.log(aspect_range[0]), np.log(aspect_range[1])))
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        if 0 < h < H and 0 < w < W:
            y = rng.integers(0, H - h + 1)
            x = rng.integers(0, W - w + 1)
            frame[y:y + h, x:x + w] = rng.random((h, w, 3))
            return frame
    return frame


def augment_clip(clip, flip_probability, erase_probability, rng, swap=COCO_FLIP):
    """
    Horizontal flip of the whole clip, then per-frame random erasing.

    Erasing is photometric only; keypoints follow the flip.
    """
    for name, p in (("flip_probability", flip_probability), ("erase_probability", erase_probability)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if rng.random() < flip_probability:
        clip = flip_clip(clip, swap)
    if erase_probability > 0:
        frames = clip.frames.copy()
        for t in range(frames.shape[0]):
            if rng.random() < erase_probability:
                frames[t] = random_erase(frames[t], rng)
        clip = replace(clip, frames=frames)
    return clip
