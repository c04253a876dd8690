"""
Static qualitative dumps: ranking strips, temporal attention weights and
part heatmaps.
"""
import json
import logging
import os

import numpy as np
from matplotlib.figure import Figure
from PIL import Image

from data_model import sample_clip
from pose_parts import joint_heatmaps, part_heatmaps, part_importance

logger = logging.getLogger(__name__)

GREEN = (0, 190, 0)
RED = (220, 0, 0)
QUERY_BORDER = (40, 90, 230)
BORDER = 3
GAP = 4


def _to_image(frame):
    return Image.fromarray(np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8))


def _framed(frame, color):
    im = _to_image(frame)
    W, H = im.size
    canvas = Image.new("RGB", (W + 2 * BORDER, H + 2 * BORDER), color)
    canvas.paste(im, (BORDER, BORDER))
    return canvas


def ranking_strip(query, ranked, correct, path):
    """
    Query frame followed by the ranked gallery frames, left to right.

    Gallery tiles are framed green when they show the query identity and
    red otherwise; each tile is the first frame of the inference clip.
    """
    tiles = [_framed(query.frames[0], QUERY_BORDER)]
    tiles += [_framed(t.frames[0], GREEN if ok else RED) for t, ok in zip(ranked, correct)]
    width = sum(t.size[0] for t in tiles) + GAP * (len(tiles) - 1)
    height = max(t.size[1] for t in tiles)
    strip = Image.new("RGB", (width, height), (255, 255, 255))
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.size[0] + GAP
    strip.save(path)
    return path


def dump_ranking(query, gallery_tracklets, distances, path, top=10):
    """Rank the gallery for one query (same id + same camera removed) and draw the top entries."""
    distances = np.asarray(distances, dtype=np.float64)
    keep = np.array([not (g.person_id == query.person_id and g.camera_id == query.camera_id)
                     for g in gallery_tracklets], dtype=bool)
    candidates = np.flatnonzero(keep)
    order = candidates[np.argsort(distances[candidates], kind="stable")][:top]
    ranked = [gallery_tracklets[i] for i in order]
    correct = [g.person_id == query.person_id for g in ranked]
    ranking_strip(query, ranked, correct, path)
    logger.info("ranking for %s: %s", query.key, "".join("+" if c else "-" for c in correct))
    return [g.key for g in ranked], correct


def attention_chart(alpha, path, title=""):
    alpha = np.asarray(alpha, dtype=np.float64)
    fig = Figure(figsize=(3 + 0.4 * alpha.size, 2.5))
    ax = fig.subplots()
    ax.bar(np.arange(alpha.size), alpha, color="#4a7bd0")
    ax.set_xticks(np.arange(alpha.size))
    ax.set_xlabel("frame")
    ax.set_ylabel("attention")
    ax.set_ylim(0, max(1.0 / alpha.size * 2, float(alpha.max()) * 1.1))
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return path


def heatmap_overlay(frame, heatmap, path):
    """Blend a [0, 1] heatmap (red) over a frame."""
    frame = np.asarray(frame, dtype=np.float64)
    peak = heatmap.max()
    weight = (heatmap / peak if peak > 0 else heatmap)[..., None]
    red = np.zeros_like(frame)
    red[..., 0] = 1.0
    blended = frame * (1.0 - 0.6 * weight) + red * 0.6 * weight
    _to_image(blended).save(path)
    return path


def heatmap_image(heatmap, path):
    """A [0, 1] heatmap as a grey image at frame resolution, scaled to its peak."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peak = heatmap.max()
    heatmap = heatmap / peak if peak > 0 else heatmap
    Image.fromarray(np.round(heatmap * 255.0).astype(np.uint8)).save(path)
    return path


def patch_grid_image(importance, layout, path, scale=8):
    """(n,) patch importance as a rows x cols grey image, enlarged by `scale`."""
    grid = np.asarray(importance, dtype=np.float64).reshape(layout.rows, layout.cols)
    peak = grid.max()
    grid = grid / peak if peak > 0 else grid
    im = Image.fromarray(np.round(grid * 255.0).astype(np.uint8))
    im.resize((layout.cols * scale, layout.rows * scale), Image.NEAREST).save(path)
    return path


def dump_heatmaps(tracklet, out_dir, layout, grouping, sigma, conf_threshold, T):
    """
    Per-part heatmaps of every sampled frame, grey and overlaid on the
    frame, plus the clip-level patch importance.

    Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    clip = sample_clip(tracklet, T, "inference")
    H, W = clip.frames.shape[1:3]
    paths = []
    for t, (frame, keypoints) in enumerate(zip(clip.frames, clip.keypoints)):
        joints = joint_heatmaps(keypoints, H, W, sigma, conf_threshold)
        parts = part_heatmaps(joints, grouping)
        for k, name in enumerate(grouping.names):
            paths.append(heatmap_image(parts[k], os.path.join(out_dir, f"frame{t}_{name}.png")))
            paths.append(heatmap_overlay(frame, parts[k], os.path.join(out_dir, f"frame{t}_{name}_overlay.png")))
    importance = part_importance(clip.keypoints, layout, grouping, sigma, conf_threshold).clip_level
    for k, name in enumerate(grouping.names):
        paths.append(patch_grid_image(importance[k], layout, os.path.join(out_dir, f"patches_{name}.png")))
    return paths


def dump_attention(model, tracklet, out_dir):
    """Temporal attention weights of one tracklet as JSON and a bar chart, plus its part heatmaps."""
    os.makedirs(out_dir, exist_ok=True)
    model.eval()
    clip = sample_clip(tracklet, model.T, "inference")
    importance = model.clip_importance(clip.keypoints)[None] if model.local_branch is not None else None
    record = {"key": tracklet.key, "sampled_indices": clip.sampled_indices.tolist(), "alpha": None}
    if model.global_branch is not None:
        out = model(clip.frames[None], np.array([clip.camera_id]), importance)
        record["alpha"] = out.global_out.alpha.values[0].tolist()
        record["a_raw"] = out.global_out.a_raw.values[0].tolist()
        attention_chart(record["alpha"], os.path.join(out_dir, "attention.png"), tracklet.key)
    with open(os.path.join(out_dir, "attention.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=1)
    record["heatmaps"] = dump_heatmaps(tracklet, os.path.join(out_dir, "heatmaps"), model.layout, model.grouping,
                                       model.sigma, model.conf_threshold, model.T)
    return record
