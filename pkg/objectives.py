"""
Loss terms and their composition.

    total  = alpha * global + (1 - alpha) * local
    global = ID + triplet + beta * center + attention regularisation
    local  = (1 / K) * sum_k (ID_k + triplet_k + beta * center_k)

ID losses read the post-norm logits, triplet and center losses the pre-norm
features. Centers are plain arrays: they receive no gradient and move only
through `update_centers`.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

import numerics as nm
from errors import BatchError, ConfigError


@dataclass
class LossWeights:
    alpha: float = 0.75
    beta: float = 0.0005
    smoothing: float = 0.1
    margin: float = 0.3
    center_lr: float = 0.5

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.alpha}", field="loss.alpha")
        if self.beta < 0:
            raise ConfigError(f"must be >= 0, got {self.beta}", field="loss.beta")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.smoothing}", field="loss.smoothing")
        if self.margin < 0:
            raise ConfigError(f"must be >= 0, got {self.margin}", field="loss.margin")
        if not 0.0 < self.center_lr <= 1.0:
            raise ConfigError(f"must lie in (0, 1], got {self.center_lr}", field="loss.center_lr")


@dataclass
class Centers:
    global_centers: np.ndarray  # (C, D)
    part_centers: np.ndarray    # (K, C, T*D)

    @classmethod
    def zeros(cls, num_classes, D, K, part_width):
        return cls(global_centers=np.zeros((num_classes, D)),
                   part_centers=np.zeros((K, num_classes, part_width)))

    def copy(self):
        return Centers(self.global_centers.copy(), self.part_centers.copy())


@dataclass
class LossBreakdown:
    id: float = 0.0
    triplet: float = 0.0
    center: float = 0.0
    attn: float = 0.0
    part_id: list = field(default_factory=list)
    part_triplet: list = field(default_factory=list)
    part_center: list = field(default_factory=list)
    global_total: float = 0.0
    local_total: float = 0.0
    total: float = 0.0
    alpha: float = 0.75

    def to_dict(self):
        return asdict(self)

    def recomputed_total(self):
        return self.alpha * self.global_total + (1.0 - self.alpha) * self.local_total


def id_loss(logits, labels, smoothing):
    """Cross-entropy against (1 - eps) * onehot + eps / C, averaged over the batch."""
    logits = nm.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, C = logits.shape
    if labels.size != batch:
        raise BatchError(f"{labels.size} labels for {batch} logit rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise BatchError(f"label outside 0..{C - 1}")
    target = np.full((batch, C), smoothing / C)
    target[np.arange(batch), labels] += 1.0 - smoothing
    return -(nm.log_softmax(logits, axis=1) * target).sum() / batch


def hardest_pairs(features, labels):
    """
    Batch-hard mining: for every anchor with a positive, the farthest
    same-label sample and the nearest different-label sample.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if np.unique(labels).size < 2:
        raise BatchError("triplet mining needs at least two classes in the batch")
    dist = np.sqrt(((features[:, None, :] - features[None, :, :]) ** 2).sum(axis=-1))
    same = labels[:, None] == labels[None, :]
    anchors, positives, negatives = [], [], []
    for a in range(labels.size):
        pos = same[a].copy()
        pos[a] = False
        if not pos.any():
            continue
        pos_idx = np.flatnonzero(pos)
        neg_idx = np.flatnonzero(~same[a])
        anchors.append(a)
        positives.append(pos_idx[np.argmax(dist[a, pos_idx])])
        negatives.append(neg_idx[np.argmin(dist[a, neg_idx])])
    if not anchors:
        raise BatchError("triplet mining needs at least two samples of some class")
    return np.array(anchors), np.array(positives), np.array(negatives)


def triplet_batch_hard(features, labels, margin):
    """Mean over anchors of max(0, d(a, hardest positive) - d(a, hardest negative) + margin)."""
    features = nm.as_tensor(features)
    a, p, n = hardest_pairs(features.values, labels)
    d_pos = nm.norm(features[a] - features[p], axis=1)
    d_neg = nm.norm(features[a] - features[n], axis=1)
    return nm.relu(d_pos - d_neg + margin).mean()


def center_loss(features, labels, centers):
    """(1 / 2B) * sum_i ||f_i - c_{y_i}||^2."""
    features = nm.as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= centers.shape[0]):
        raise BatchError(f"no center for label(s) {sorted(set(labels[labels >= centers.shape[0]].tolist()))}")
    diff = features - centers[labels]
    return (diff * diff).sum() / (2.0 * labels.size)


def update_centers(features, labels, centers, center_lr):
    """c <- c - lr * (c - batch mean of the class); classes absent from the batch stay put."""
    if not 0.0 < center_lr <= 1.0:
        raise ValueError(f"center_lr must lie in (0, 1], got {center_lr}")
    features = np.asarray(features, dtype=centers.dtype)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    updated = centers.copy()
    for label in np.unique(labels):
        mean = features[labels == label].mean(axis=0)
        updated[label] = updated[label] - center_lr * (updated[label] - mean)
    return updated


def attention_reg(alpha):
    """sum_t alpha_t^2 per clip, averaged over the batch; lies in [1/T, 1]."""
    alpha = nm.as_tensor(alpha)
    if alpha.ndim == 1:
        alpha = alpha.reshape(1, -1)
    return (alpha * alpha).sum(axis=1).mean()


def global_loss(out, labels, weights, centers):
    terms = {
        "id": id_loss(out.logits, labels, weights.smoothing),
        "triplet": triplet_batch_hard(out.f, labels, weights.margin),
        "center": center_loss(out.f, labels, centers),
        "attn": attention_reg(out.alpha),
    }
    total = terms["id"] + terms["triplet"] + nm.scale(terms["center"], weights.beta) + terms["attn"]
    return total, terms


def part_loss(f_part, logits, labels, weights, centers):
    terms = {
        "id": id_loss(logits, labels, weights.smoothing),
        "triplet": triplet_batch_hard(f_part, labels, weights.margin),
        "center": center_loss(f_part, labels, centers),
    }
    total = terms["id"] + terms["triplet"] + nm.scale(terms["center"], weights.beta)
    return total, terms


def total_loss(global_out, local_out, labels, weights, centers, use_global=True, use_local=True):
    """
    Compose the objective and report every term.

    With the local branch disabled the total is the global objective
    exactly, and vice versa.
    """
    if not (use_global or use_local):
        raise ConfigError("at least one branch must be trained", field="train.ablate")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size < 2:
        raise BatchError("the objective needs a batch of at least two clips")
    breakdown = LossBreakdown(alpha=weights.alpha if use_global and use_local else float(use_global))

    g_total = l_total = None
    if use_global:
        g_total, terms = global_loss(global_out, labels, weights, centers.global_centers)
        breakdown.id = terms["id"].item()
        breakdown.triplet = terms["triplet"].item()
        breakdown.center = terms["center"].item()
        breakdown.attn = terms["attn"].item()
        breakdown.global_total = g_total.item()

    if use_local:
        K = local_out.f_parts.shape[1]
        part_sum = None
        for k in range(K):
            part_total, terms = part_loss(local_out.f_parts[:, k, :], local_out.logits[k], labels,
                                          weights, centers.part_centers[k])
            breakdown.part_id.append(terms["id"].item())
            breakdown.part_triplet.append(terms["triplet"].item())
            breakdown.part_center.append(terms["center"].item())
            part_sum = part_total if part_sum is None else part_sum + part_total
        l_total = nm.scale(part_sum, 1.0 / K)
        breakdown.local_total = l_total.item()

    if use_global and use_local:
        total = nm.scale(g_total, weights.alpha) + nm.scale(l_total, 1.0 - weights.alpha)
    else:
        total = g_total if use_global else l_total
    breakdown.total = total.item()
    return total, breakdown
