"""
Inference-time descriptors, the gallery file and cross-camera evaluation.
"""
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from data_model import sample_clip
from errors import EvaluationError, GalleryError, ShapeError

logger = logging.getLogger(__name__)

GALLERY_MAGIC = b"KRIDGAL1"


@dataclass
class Descriptor:
    vector: np.ndarray
    person_id: int
    camera_id: int
    key: str = ""


@dataclass
class EvalResult:
    mAP: float
    cmc: list
    num_valid_queries: int
    num_queries: int = 0

    def rank(self, k):
        return self.cmc[min(k, len(self.cmc)) - 1]

    def to_dict(self):
        return {"mAP": self.mAP, "cmc": list(self.cmc), "num_valid_queries": self.num_valid_queries,
                "num_queries": self.num_queries}


@dataclass
class Gallery:
    features: np.ndarray            # (N, width) float32
    person_ids: np.ndarray          # (N,) int64
    camera_ids: np.ndarray          # (N,) int64
    keys: list = field(default_factory=list)
    K: int = 0
    D: int = 0
    T: int = 0
    checkpoint_hash: str = ""

    @property
    def width(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    @classmethod
    def from_descriptors(cls, descriptors, width, K=0, D=0, T=0, checkpoint_hash=""):
        features = np.zeros((0, width), dtype=np.float32)
        if descriptors:
            features = np.stack([d.vector for d in descriptors]).astype(np.float32)
        if features.shape[1] != width:
            raise GalleryError(f"descriptors have width {features.shape[1]}, expected {width}")
        if not np.all(np.isfinite(features)):
            raise GalleryError("descriptors must be finite")
        return cls(features=features,
                   person_ids=np.array([d.person_id for d in descriptors], dtype=np.int64),
                   camera_ids=np.array([d.camera_id for d in descriptors], dtype=np.int64),
                   keys=[d.key for d in descriptors], K=K, D=D, T=T, checkpoint_hash=checkpoint_hash)


def _inference_inputs(model, tracklets):
    clips = [sample_clip(t, model.T, "inference") for t in tracklets]
    frames = np.stack([c.frames for c in clips])
    cams = np.array([c.camera_id for c in clips], dtype=np.int64)
    importance = None
    if model.local_branch is not None:
        importance = np.stack([model.clip_importance(c.keypoints) for c in clips])
    return frames, cams, importance


def embed_tracklet(model, tracklet):
    """Descriptor of one tracklet from its inference-mode clip."""
    return embed_split(model, [tracklet], batch_size=1)[0]


def embed_split(model, tracklets, batch_size=16):
    """
    Descriptors of many tracklets, `batch_size` clips per forward pass.

    The model is switched to eval mode; descriptors of ablated branches are
    left out.
    """
    model.eval()
    descriptors = []
    for start in range(0, len(tracklets), batch_size):
        chunk = tracklets[start:start + batch_size]
        frames, cams, importance = _inference_inputs(model, chunk)
        vectors = model.descriptor(model(frames, cams, importance))
        descriptors.extend(Descriptor(vector=v.copy(), person_id=t.person_id, camera_id=t.camera_id, key=t.key)
                           for v, t in zip(vectors, chunk))
    return descriptors


def pairwise_distances(queries, gallery):
    """Euclidean distances, (Q, d) x (G, d) -> (Q, G)."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2:
        raise ShapeError("queries and gallery must be 2-D")
    if queries.shape[1] != gallery.shape[1]:
        raise ShapeError(f"query width {queries.shape[1]} differs from gallery width {gallery.shape[1]}")
    if queries.shape[0] == 0 or gallery.shape[0] == 0:
        return np.zeros((queries.shape[0], gallery.shape[0]))
    return cdist(queries, gallery, metric="euclidean")


def evaluate(dist, q_ids, q_cams, g_ids, g_cams, max_rank=20):
    """
    mAP and CMC under the cross-camera protocol.

    For every query, gallery entries sharing both its identity and camera
    are removed; the rest is ranked by ascending distance, ties by gallery
    index. Queries without a remaining positive are dropped. CMC curves of
    galleries shorter than max_rank are extended with their last value.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids).reshape(-1), np.asarray(q_cams).reshape(-1)
    g_ids, g_cams = np.asarray(g_ids).reshape(-1), np.asarray(g_cams).reshape(-1)
    if dist.shape != (q_ids.size, g_ids.size) or q_cams.size != q_ids.size or g_cams.size != g_ids.size:
        raise ShapeError(f"distance matrix {dist.shape} does not match {q_ids.size} queries "
                         f"and {g_ids.size} gallery entries")
    if max_rank < 1:
        raise ValueError(f"max_rank must be >= 1, got {max_rank}")

    all_cmc, all_ap = [], []
    for q in range(q_ids.size):
        keep = ~((g_ids == q_ids[q]) & (g_cams == q_cams[q]))
        order = np.argsort(dist[q, keep], kind="stable")
        matches = (g_ids[keep][order] == q_ids[q]).astype(np.float64)
        if not matches.any():
            continue
        hits = np.cumsum(matches)
        cmc = (hits >= 1).astype(np.float64)
        if cmc.size < max_rank:
            cmc = np.concatenate([cmc, np.full(max_rank - cmc.size, cmc[-1])])
        all_cmc.append(cmc[:max_rank])
        ranks = np.flatnonzero(matches) + 1.0
        all_ap.append(float(np.mean(np.arange(1, ranks.size + 1) / ranks)))

    if not all_ap:
        raise EvaluationError(f"all {q_ids.size} queries dropped: no query has a valid gallery positive")
    dropped = q_ids.size - len(all_ap)
    if dropped:
        logger.info("%d of %d queries have no valid positive and were dropped", dropped, q_ids.size)
    cmc = np.mean(np.stack(all_cmc), axis=0)
    return EvalResult(mAP=float(np.mean(all_ap)), cmc=[float(c) for c in cmc],
                      num_valid_queries=len(all_ap), num_queries=int(q_ids.size))


def evaluate_galleries(queries, gallery, max_rank=20):
    if queries.width != gallery.width:
        raise GalleryError(f"query width {queries.width} does not match gallery width {gallery.width}")
    dist = pairwise_distances(queries.features, gallery.features)
    return evaluate(dist, queries.person_ids, queries.camera_ids, gallery.person_ids, gallery.camera_ids,
                    max_rank)


def split_gallery(model, tracklets, batch_size=16, checkpoint_hash=""):
    """Embed tracklets into a Gallery tagged with the model's shape."""
    descriptors = embed_split(model, tracklets, batch_size)
    K = model.grouping.K if model.local_branch is not None else 0
    return Gallery.from_descriptors(descriptors, model.descriptor_width, K=K, D=model.D, T=model.T,
                                    checkpoint_hash=checkpoint_hash)


def evaluate_split(model, dataset, eval_config, checkpoint_hash=""):
    """Embed the query and gallery splits and evaluate them against each other."""
    queries = split_gallery(model, dataset.tracklets("query"), eval_config.batch_size, checkpoint_hash)
    gallery = split_gallery(model, dataset.tracklets("gallery"), eval_config.batch_size, checkpoint_hash)
    return evaluate_galleries(queries, gallery, eval_config.max_rank)


def save_gallery(gallery, path):
    """
    magic | u32 header length | JSON header | <f4 features | <i8 ids | <i8 cameras
    """
    header = {"width": gallery.width, "K": gallery.K, "D": gallery.D, "T": gallery.T,
              "count": len(gallery), "checkpoint_hash": gallery.checkpoint_hash, "keys": list(gallery.keys)}
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(GALLERY_MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(np.ascontiguousarray(gallery.features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(gallery.person_ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(gallery.camera_ids, dtype="<i8").tobytes())
    return path


def load_gallery(path, expected_width=None, checkpoint_hash=None):
    """
    Read a gallery file.

    A width different from `expected_width` is an error; a checkpoint hash
    different from `checkpoint_hash` is logged as a warning.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise GalleryError(f"cannot read gallery: {e}") from None
    if not blob.startswith(GALLERY_MAGIC):
        raise GalleryError(f"{path} is not a gallery file")
    offset = len(GALLERY_MAGIC)
    (length,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    try:
        header = json.loads(blob[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GalleryError(f"{path}: corrupt header ({e})") from None
    offset += length
    count, width = header["count"], header["width"]
    expected_bytes = count * width * 4 + 2 * count * 8
    if len(blob) - offset != expected_bytes:
        raise GalleryError(f"{path}: {len(blob) - offset} payload bytes, expected {expected_bytes}")
    features = np.frombuffer(blob, dtype="<f4", count=count * width, offset=offset).reshape(count, width)
    offset += count * width * 4
    person_ids = np.frombuffer(blob, dtype="<i8", count=count, offset=offset)
    offset += count * 8
    camera_ids = np.frombuffer(blob, dtype="<i8", count=count, offset=offset)

    if expected_width is not None and width != expected_width:
        raise GalleryError(f"gallery width {width} does not match the query width {expected_width}")
    if checkpoint_hash and header["checkpoint_hash"] and header["checkpoint_hash"] != checkpoint_hash:
        logger.warning("gallery %s was embedded with checkpoint %s..., the current one is %s...",
                       path, header["checkpoint_hash"][:12], checkpoint_hash[:12])
    return Gallery(features=features.astype(np.float32), person_ids=person_ids.astype(np.int64),
                   camera_ids=camera_ids.astype(np.int64), keys=list(header.get("keys", [])),
                   K=header["K"], D=header["D"], T=header["T"], checkpoint_hash=header["checkpoint_hash"])
