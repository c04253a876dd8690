"""
PK-sampled training with SGD + momentum, linear warmup and cosine decay.

`fit` owns the loop: it assembles batches in a thread pool, applies
`train_step`, appends one JSON event per step to the run's training log,
checkpoints every epoch and evaluates on the query/gallery split at the
configured interval. Every random draw comes from the state generator, so a
run is a function of its config and seed, and resuming from a checkpoint
continues the same sequence.
"""
import glob
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import numerics as nm
from checkpoint import load_checkpoint, prefixed, save_checkpoint
from data_model import augment_clip, sample_clip
from errors import BatchError, CheckpointError, ConfigError, NonFiniteError, TrainingAbort
from logs import EventLog, log
from model import build_model, parameter_groups
from objectives import Centers, total_loss, update_centers
from retrieval import evaluate_split

logger = logging.getLogger(__name__)

ABLATIONS = ("no_tcss", "no_kps", "no_local", "no_global")
TRAIN_LOG = "train_log.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 0.008
    momentum: float = 0.9
    batch: int = 32
    P_ids: int = 8
    K_instances: int = 4
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    T: int = 4
    seed: int = 0
    no_tcss: bool = False
    no_kps: bool = False
    no_local: bool = False
    no_global: bool = False
    steps_per_epoch: int = 0  # 0: one pass over the train tracklets
    eval_interval: int = 5
    precision: str = "float64"

    def validate(self):
        if self.P_ids * self.K_instances != self.batch:
            raise ConfigError(f"P_ids x K_instances = {self.P_ids * self.K_instances} differs from "
                              f"batch = {self.batch}", field="train.batch")
        if self.P_ids < 2 or self.K_instances < 1:
            raise ConfigError("batch-hard mining needs P_ids >= 2 and K_instances >= 1", field="train.P_ids")
        if self.epochs < 0:
            raise ConfigError(f"must be >= 0, got {self.epochs}", field="train.epochs")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"must lie in [0, epochs), got {self.warmup_epochs}", field="train.warmup_epochs")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be >= 0", field="train.base_lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.momentum}", field="train.momentum")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"expected float64 or float32, got {self.precision!r}", field="train.precision")
        if self.no_local and self.no_global:
            raise ConfigError("no_local and no_global together leave nothing to train", field="train.ablate")
        if self.steps_per_epoch < 0 or self.eval_interval < 0:
            raise ConfigError("steps_per_epoch and eval_interval must be >= 0", field="train.steps_per_epoch")

    @property
    def ablations(self):
        return [name for name in ABLATIONS if getattr(self, name)]


@dataclass
class TrainState:
    model: object
    momentum: dict
    centers: Centers
    rng: np.random.Generator
    epoch: int = 0          # completed epochs
    step: int = 0
    best_metric: float = -1.0
    best_epoch: int = -1
    history: list = field(default_factory=list)


@dataclass
class Batch:
    frames: np.ndarray          # (B, T, H, W, 3)
    importance: np.ndarray      # (B, K, n) or None
    labels: np.ndarray          # (B,)
    camera_ids: np.ndarray      # (B,)
    keys: list


def worker_count():
    try:
        threads = int(os.environ.get("KEYREID_THREADS", os.cpu_count() or 1))
    except ValueError:
        threads = 1
    return max(1, threads)


def lr_schedule(e, config):
    """Linear warmup to base_lr over warmup_epochs, then cosine decay to 0 at `epochs`."""
    if not 0 <= e < config.epochs:
        raise ValueError(f"epoch {e} outside 0..{config.epochs - 1}")
    warmup = config.warmup_epochs
    if e < warmup:
        return config.base_lr * (e + 1) / warmup
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * (e - warmup) / (config.epochs - warmup)))


class ClipPipeline:
    """Sampling, augmentation and part importance of one training clip."""

    def __init__(self, T, flip_probability, erase_probability, swap, importance_fn=None):
        self.T = T
        self.flip_probability = flip_probability
        self.erase_probability = erase_probability
        self.swap = swap
        self.importance_fn = importance_fn

    def __call__(self, tracklet, seed):
        rng = np.random.default_rng(seed)
        clip = sample_clip(tracklet, self.T, "train", rng)
        clip = augment_clip(clip, self.flip_probability, self.erase_probability, rng, self.swap)
        importance = self.importance_fn(clip.keypoints) if self.importance_fn else None
        return clip, importance

    @classmethod
    def for_model(cls, model, data_config):
        importance_fn = model.clip_importance if model.local_branch is not None else None
        return cls(model.T, data_config.flip_probability, data_config.erase_probability,
                   model.grouping.left_right_swap, importance_fn)


def pk_sample(tracklets, P_ids, K_instances, rng, pipeline):
    """
    P identities without replacement, K tracklets each, one augmented clip per slot.

    Identities with fewer than K tracklets are sampled with replacement.
    Each slot gets its own child seed, so the batch does not depend on how
    the thread pool schedules the work.
    """
    by_id = {}
    for tracklet in tracklets:
        by_id.setdefault(tracklet.person_id, []).append(tracklet)
    ids = sorted(by_id)
    if len(ids) < P_ids:
        raise BatchError(f"PK sampling needs {P_ids} identities, the train split has {len(ids)}")

    chosen = rng.choice(ids, size=P_ids, replace=False)
    slots = []
    for person_id in chosen:
        pool = by_id[int(person_id)]
        picks = rng.choice(len(pool), size=K_instances, replace=len(pool) < K_instances)
        slots.extend(pool[i] for i in picks)
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(slots))

    with ThreadPoolExecutor(max_workers=min(worker_count(), len(slots))) as executor:
        results = list(executor.map(pipeline, slots, seeds))

    clips = [clip for clip, _ in results]
    importance = None
    if results[0][1] is not None:
        importance = np.stack([imp for _, imp in results])
    return Batch(frames=np.stack([c.frames for c in clips]), importance=importance,
                 labels=np.array([c.person_id for c in clips], dtype=np.int64),
                 camera_ids=np.array([c.camera_id for c in clips], dtype=np.int64),
                 keys=[c.key for c in clips])


def init_state(model, run_config):
    """Fresh optimizer state: zero momentum and centers, generator seeded from the run seed."""
    T, D = model.T, model.D
    num_classes = _num_classes(model)
    return TrainState(model=model,
                      momentum={name: np.zeros_like(p.values) for name, p in model.named_parameters()},
                      centers=Centers.zeros(num_classes, D, model.grouping.K, T * D),
                      rng=np.random.default_rng([run_config.train.seed, 1]))


def _num_classes(model):
    branch = model.global_branch or model.local_branch
    head = branch.head if model.global_branch is not None else branch.heads[0]
    return head.classifier.weight.shape[1]


def train_step(state, batch, lr, run_config):
    """
    One SGD step on `batch`; returns (state, LossBreakdown).

    v <- mu v + g;  theta <- theta - lr v - lr wd theta  (wd on matrices and kernels)

    Centers move after the parameter step. A non-finite loss or gradient
    raises TrainingAbort with parameters, buffers, momentum, centers and the
    generator exactly as they were.
    """
    model, train = state.model, run_config.train
    buffers = {name: buf.copy() for name, buf in model.named_buffers()}
    rng_state = state.rng.bit_generator.state

    def abort(reason):
        for name, buf in model.named_buffers():
            np.copyto(buf, buffers[name])
        state.rng.bit_generator.state = rng_state
        raise TrainingAbort(f"step {state.step}: {reason}; state left unchanged")

    model.train()
    model.zero_grad()
    if run_config.backbone.dropout > 0:
        model.set_dropout_rng(np.random.default_rng(state.rng.integers(0, 2 ** 63 - 1)))
    try:
        out = model(batch.frames, batch.camera_ids, batch.importance)
        total, breakdown = total_loss(out.global_out, out.local_out, batch.labels, run_config.loss,
                                      state.centers, use_global=out.global_out is not None,
                                      use_local=out.local_out is not None)
    except NonFiniteError as e:
        abort(str(e))
    if not np.isfinite(total.item()):
        abort(f"non-finite loss {total.item()}")
    total.backward()
    decay, no_decay = parameter_groups(model)
    for _, p in decay + no_decay:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            abort("non-finite gradient")

    decayed = {name for name, _ in decay}
    for name, p in decay + no_decay:
        grad = p.grad if p.grad is not None else np.zeros_like(p.values)
        v = state.momentum[name]
        v *= train.momentum
        v += grad
        shrink = lr * train.weight_decay * p.values if name in decayed else 0.0
        p.values -= lr * v + shrink

    centers = state.centers
    if out.global_out is not None:
        centers.global_centers = update_centers(out.global_out.f.values, batch.labels, centers.global_centers,
                                                run_config.loss.center_lr)
    if out.local_out is not None:
        f_parts = out.local_out.f_parts.values
        for k in range(f_parts.shape[1]):
            centers.part_centers[k] = update_centers(f_parts[:, k, :], batch.labels, centers.part_centers[k],
                                                     run_config.loss.center_lr)
    state.step += 1
    return state, breakdown


def steps_per_epoch(train, num_train):
    if train.steps_per_epoch > 0:
        return train.steps_per_epoch
    return max(1, math.ceil(num_train / train.batch))


# checkpoints

def checkpoint_arrays(state):
    arrays = {f"model/{name}": value for name, value in state.model.state_dict().items()}
    arrays.update({f"momentum/{name}": value for name, value in state.momentum.items()})
    arrays["centers/global"] = state.centers.global_centers
    arrays["centers/parts"] = state.centers.part_centers
    return arrays


def checkpoint_header(state, run_config, num_cameras):
    return {
        "config": run_config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "num_classes": _num_classes(state.model),
        "num_cameras": num_cameras,
        "descriptor_width": state.model.descriptor_width,
        "rng_state": state.rng.bit_generator.state,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "history": state.history,
    }


def save_state(path, state, run_config, num_cameras):
    return save_checkpoint(path, checkpoint_header(state, run_config, num_cameras), checkpoint_arrays(state))


def restore_state(state, path):
    """Load a checkpoint into an existing state built from the same config."""
    header, arrays = load_checkpoint(path)
    state.model.load_state_dict(prefixed(arrays, "model"))
    momentum = prefixed(arrays, "momentum")
    if set(momentum) != set(state.momentum):
        raise CheckpointError(f"{path}: optimizer state does not match the model")
    for name, value in momentum.items():
        if value.shape != state.momentum[name].shape:
            raise CheckpointError(f"{path}: momentum {name} has shape {value.shape}")
        state.momentum[name] = value.astype(state.momentum[name].dtype)
    dtype = state.centers.global_centers.dtype
    state.centers = Centers(arrays["centers/global"].astype(dtype), arrays["centers/parts"].astype(dtype))
    state.rng.bit_generator.state = header["rng_state"]
    state.epoch = header["epoch"]
    state.step = header["step"]
    state.best_metric = header["best_metric"]
    state.best_epoch = header["best_epoch"]
    state.history = [dict(entry) for entry in header.get("history", [])]
    return state, header


def fit(run_config, dataset, run_dir, resume=None):
    """
    Train on the dataset's train split; returns the final TrainState.

    Writes `train_log.jsonl`, `epoch_XXX.ckpt`, `last.ckpt` and, when
    Rank-1 improves, `best.ckpt` under run_dir. `resume` names a checkpoint
    of the same run; the loop continues with its epoch, step and generator.
    """
    train = run_config.train
    nm.set_default_dtype(train.precision)
    train_tracklets = dataset.tracklets("train")
    if not train_tracklets:
        raise BatchError("no tracklets in split 'train'")
    model = build_model(run_config, dataset.num_classes, dataset.num_cameras, seed=train.seed)
    state = init_state(model, run_config)
    events = EventLog(os.path.join(run_dir, TRAIN_LOG))
    events.write("config", config=run_config.to_dict(), num_classes=dataset.num_classes,
                 num_cameras=dataset.num_cameras, num_train=len(train_tracklets))
    if resume:
        state, _ = restore_state(state, resume)
        events.write("resume", checkpoint=os.path.abspath(resume), epoch=state.epoch, step=state.step)
        log(f"resumed from {resume} at epoch {state.epoch}, step {state.step}")

    pipeline = ClipPipeline.for_model(model, run_config.data)
    steps = steps_per_epoch(train, len(train_tracklets))
    can_evaluate = bool(dataset.tracklets("query")) and bool(dataset.tracklets("gallery"))

    for epoch in range(state.epoch, train.epochs):
        lr = lr_schedule(epoch, train)
        started = time.time()
        for _ in range(steps):
            batch = pk_sample(train_tracklets, train.P_ids, train.K_instances, state.rng, pipeline)
            state, breakdown = train_step(state, batch, lr, run_config)
            events.write("step", step=state.step, epoch=epoch, lr=lr, wall=time.time() - started,
                         **breakdown.to_dict())
        state.epoch = epoch + 1
        log(f"epoch {state.epoch}/{train.epochs}: lr {lr:.6g}, loss {breakdown.total:.4f}, "
            f"{time.time() - started:.1f}s")

        last_epoch = state.epoch == train.epochs
        due = train.eval_interval > 0 and (state.epoch % train.eval_interval == 0 or last_epoch)
        if can_evaluate and due:
            result = evaluate_split(model, dataset, run_config.eval)
            rank1 = float(result.cmc[0])
            state.history.append({"epoch": state.epoch, "mAP": result.mAP, "rank1": rank1})
            events.write("eval", epoch=state.epoch, step=state.step, mAP=result.mAP, rank1=rank1,
                         cmc=result.cmc, num_valid_queries=result.num_valid_queries)
            log(f"epoch {state.epoch}: mAP {result.mAP:.4f}, Rank-1 {rank1:.4f}")
            if rank1 > state.best_metric:
                state.best_metric, state.best_epoch = rank1, state.epoch
                save_state(os.path.join(run_dir, "best.ckpt"), state, run_config, dataset.num_cameras)

        save_state(os.path.join(run_dir, f"epoch_{state.epoch:03d}.ckpt"), state, run_config,
                   dataset.num_cameras)
        save_state(os.path.join(run_dir, "last.ckpt"), state, run_config, dataset.num_cameras)

    if train.epochs == 0 or state.epoch == 0:
        save_state(os.path.join(run_dir, "last.ckpt"), state, run_config, dataset.num_cameras)
    return state


def ablation_report(run_dirs, tolerance=0.02):
    """
    Final mAP and Rank-1 of each run, averaged per ablation over seeds.

    The `contradicts_full` column flags variants whose mAP beats the full
    model by more than `tolerance`; such rows are findings, not failures.
    """
    rows = []
    for run_dir in run_dirs:
        events = EventLog(os.path.join(run_dir, TRAIN_LOG)).read()
        configs = [e for e in events if e["event"] == "config"]
        evals = [e for e in events if e["event"] == "eval"]
        if not configs or not evals:
            logger.warning("%s has no config or eval events, skipped", run_dir)
            continue
        flags = configs[0]["config"]["train"]
        ablated = [name for name in ABLATIONS if flags.get(name)]
        rows.append({"run": run_dir, "variant": "+".join(ablated) or "full", "seed": flags["seed"],
                     "mAP": evals[-1]["mAP"], "rank1": evals[-1]["rank1"]})
    if not rows:
        raise BatchError("no finished runs to report on")
    runs = pd.DataFrame(rows)
    table = runs.groupby("variant", sort=True).agg(mAP=("mAP", "mean"), rank1=("rank1", "mean"),
                                                   seeds=("seed", "count")).reset_index()
    if "full" in set(table["variant"]):
        full_map = float(table.loc[table["variant"] == "full", "mAP"].iloc[0])
        table["delta_mAP"] = table["mAP"] - full_map
        table["contradicts_full"] = table["delta_mAP"] > tolerance
    else:
        table["delta_mAP"] = np.nan
        table["contradicts_full"] = False
    return table


def find_runs(root):
    """Run directories (holding a training log) below `root`."""
    return sorted(os.path.dirname(p) for p in glob.glob(os.path.join(root, "**", TRAIN_LOG), recursive=True))
