"""Optimization, evaluation and the experiment drivers built on them."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .concepts import ConceptSet, subset_concepts
from .data import DriveSequence, normalize_sensors
from .errors import NumericError, ParameterError, ValidationError
from .model import (
    TARGET_INDEX,
    ModelConfig,
    ModelParams,
    encode,
    init_params,
    predict_batch,
    sequence_features,
)
from .numerics import ShapeError, Tape, Tensor
from .rng import derive_seed, make_rng

LR_SCHEDULES = ("cosine", "constant")
DEFAULT_SPLIT = (0.85, 0.05, 0.10)
DISTANCE_CAP = 70.0
DISTANCE_BINS = tuple((lo, lo + 10.0) for lo in range(0, 70, 10))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    task_weights: tuple[float, float] = (1.0, 1.0)  # (angle, distance)
    distance_cap: float = DISTANCE_CAP
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        w = tuple(float(x) for x in self.task_weights)
        if len(w) != 2 or min(w) < 0 or max(w) == 0:
            raise ValidationError("task weights must be two nonnegative numbers, not both zero")
        object.__setattr__(self, "task_weights", w)
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def weight(self, task: str) -> float:
        return self.task_weights[TARGET_INDEX[task]]


# ---------------------------------------------------------------------------
# losses


def rmse_loss(pred, target) -> Tensor:
    """sqrt(mean((pred - target)^2)); the gradient at zero error is 0."""
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"rmse_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        raise ShapeError("rmse_loss needs at least one sample")
    return nx.sqrt(nx.mean(nx.square(pred - target)))


def multi_task_loss(losses: dict[str, Tensor], weights=(1.0, 1.0)) -> Tensor:
    """Weighted sum of per-task losses; ``weights`` is ``(angle, distance)``."""
    total = None
    for task, loss in losses.items():
        term = loss * float(weights[TARGET_INDEX[task]])
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no task losses to combine")
    return total


# ---------------------------------------------------------------------------
# data handling


def split_dataset(sequences: Sequence, ratios=DEFAULT_SPLIT, seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test slices.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ParameterError(f"split ratios must be three numbers summing to 1, got {ratios}")
    n = len(sequences)
    if n < 3:
        raise ParameterError(f"need at least 3 sequences to split, got {n}")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    perm = make_rng(seed, "split").permutation(n)
    train = [sequences[i] for i in perm[:n_train]]
    val = [sequences[i] for i in perm[n_train : n_train + n_val]]
    test = [sequences[i] for i in perm[n_train + n_val :]]
    return train, val, test


def filter_distance(seq: DriveSequence, cap: float = DISTANCE_CAP) -> DriveSequence | None:
    """The sequence itself if its distance target is within ``cap``, else None."""
    return seq if seq.distance <= cap else None


def distance_mask(seqs: Sequence[DriveSequence], cap: float = DISTANCE_CAP) -> np.ndarray:
    return np.array([filter_distance(s, cap) is not None for s in seqs], dtype=bool)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    lr: float | None = None,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, with optional global-norm clipping.

    ``lr`` overrides ``config.learning_rate`` for this step (used by schedules).
    """
    lr = config.learning_rate if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            grads = {n: g * (config.grad_clip / norm) for n, g in grads.items()}
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    m, v, new = {}, {}, {}
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {t.shape}")
        m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        new[name] = t.data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params.replace(new), AdamState(step, m, v)


def scheduled_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step``; cosine decays from the peak toward 0."""
    if config.lr_schedule == "constant" or total_steps <= 1:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mae: dict[str, float]


@dataclass
class FitResult:
    params: ModelParams
    log: list[EpochLog]
    best_epoch: int


def _target_stats(train: Sequence[DriveSequence], cap: float) -> tuple[np.ndarray, np.ndarray]:
    targets = np.array([s.targets for s in train])
    mask = distance_mask(train, cap)
    mean = np.zeros(2)
    std = np.ones(2)
    mean[0], std[0] = targets[:, 0].mean(), targets[:, 0].std()
    if mask.any():
        mean[1], std[1] = targets[mask, 1].mean(), targets[mask, 1].std()
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise NumericError(f"target statistics are not finite: mean {mean}, std {std}")
    return mean, np.maximum(std, 1e-6)


def _batch_loss(batch, feats_cache, params, config, info, rng, training=True):
    preds: dict[str, list[Tensor]] = {t: [] for t in config.task_names}
    targets: dict[str, list[np.ndarray]] = {t: [] for t in config.task_names}
    masks: dict[str, list[np.ndarray]] = {t: [] for t in config.task_names}
    groups: dict[int, list[int]] = {}
    for i in batch:
        groups.setdefault(feats_cache[i].shape[0], []).append(i)
    b = params.buffers
    for members in groups.values():
        feats = np.stack([feats_cache[i] for i in members])
        out, _ = encode(feats, params, config, rng, training)
        for task, p in out.items():
            j = TARGET_INDEX[task]
            preds[task].append(p)
            tgt = np.array([info["targets"][i][j] for i in members])
            targets[task].append((tgt - b["target_mean"][j]) / b["target_std"][j])
            masks[task].append(
                np.ones(len(members), bool) if task == "angle" else info["dmask"][members]
            )
    losses = {}
    for task in config.task_names:
        mask = np.concatenate(masks[task])
        if not mask.any():
            continue
        pred = preds[task][0] if len(preds[task]) == 1 else nx.concat(preds[task], axis=0)
        tgt = np.concatenate(targets[task])
        if not mask.all():
            pred = pred[np.flatnonzero(mask)]
            tgt = tgt[mask]
        losses[task] = rmse_loss(pred, tgt)
    return losses


def fit(
    train: Sequence[DriveSequence],
    val: Sequence[DriveSequence],
    concept_set: ConceptSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> FitResult:
    """Train with RMSE per task and keep the parameters with the best validation MAE."""
    if not train:
        raise ParameterError("training split is empty")
    cfg, tcfg = model_config, train_config
    if concept_set.k != cfg.n_concepts:
        raise ShapeError(f"concept set has {concept_set.k} concepts, config expects {cfg.n_concepts}")
    params = init_params(cfg, derive_seed(tcfg.seed, "model"))
    norm = normalize_sensors(train)
    t_mean, t_std = _target_stats(train, tcfg.distance_cap)
    params.buffers.update(
        sensor_mean=norm.mean, sensor_std=norm.std, target_mean=t_mean, target_std=t_std
    )
    feats = [sequence_features(s, concept_set, params)[0] for s in train]
    info = {"targets": [s.targets for s in train], "dmask": distance_mask(train, tcfg.distance_cap)}
    if "distance" in cfg.task_names and cfg.tasks == "distance" and not info["dmask"].any():
        raise ParameterError(f"no training sequence has distance within {tcfg.distance_cap} m")

    shuffle_rng = make_rng(tcfg.seed, "shuffle")
    dropout_rng = make_rng(tcfg.seed, "dropout")
    state = AdamState()
    total_steps = tcfg.epochs * math.ceil(len(train) / tcfg.batch_size)
    log: list[EpochLog] = []
    best, best_score, best_epoch = params, math.inf, 0
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        batch_losses = []
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = order[start : start + tcfg.batch_size]
            with Tape() as tape:
                losses = _batch_loss(batch, feats, params, cfg, info, dropout_rng)
                if not losses:
                    continue
                loss = multi_task_loss(losses, tcfg.task_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}, step {step}: {value}")
            grads = tape.backward(loss, wrt=list(params.tensors.values()))
            named = {n: grads[t] for n, t in params.tensors.items()}
            lr = scheduled_lr(tcfg, state.step, total_steps)
            params, state = adam_step(params, named, state, tcfg, lr)
            batch_losses.append(value)
        train_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        val_mae = evaluate(val, concept_set, params, cfg, tcfg.distance_cap).mae if val else {}
        log.append(EpochLog(epoch, train_loss, val_mae))
        # rank epochs by target-std-scaled validation error; without a
        # validation split the last epoch wins
        score = (
            sum(v / t_std[TARGET_INDEX[t]] for t, v in val_mae.items() if math.isfinite(v))
            if val_mae
            else -epoch
        )
        if score < best_score:
            best, best_score, best_epoch = params, score, epoch
    return FitResult(best, log, best_epoch)


def write_log_csv(log: Sequence[EpochLog], path, append: bool = False) -> None:
    path_exists = append and Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not path_exists:
            writer.writerow(["epoch", "split", "task", "metric", "value"])
        for row in log:
            writer.writerow([row.epoch, "train", "all", "rmse", repr(row.train_loss)])
            for task, v in row.val_mae.items():
                writer.writerow([row.epoch, "val", task, "mae", repr(v)])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mae: dict[str, float]
    bins: dict[str, list[dict]]
    counts: dict[str, int]

    @property
    def pair(self) -> list[float]:
        """``[a-MAE, d-MAE]`` for multi-task models."""
        return [self.mae.get("angle", float("nan")), self.mae.get("distance", float("nan"))]

    def to_dict(self) -> dict:
        return {"mae": self.mae, "pair": self.pair, "bins": self.bins, "counts": self.counts}


def binned_errors(truth: np.ndarray, err: np.ndarray, task: str) -> list[dict]:
    """MAE per ground-truth magnitude bin.

    Distance uses 10 m bins over [0, 70]; angle uses deciles of |a|.
    """
    if task == "distance":
        edges = [lo for lo, _ in DISTANCE_BINS] + [DISTANCE_BINS[-1][1]]
        which = np.minimum((truth // 10.0).astype(int), len(DISTANCE_BINS) - 1)
        which = np.maximum(which, 0)
    else:
        mag = np.abs(truth)
        edges = list(np.quantile(mag, np.linspace(0.0, 1.0, 11)))
        which = np.searchsorted(np.array(edges[1:-1]), mag, side="right")
    rows = []
    for b in range(len(edges) - 1):
        sel = which == b
        rows.append(
            {
                "lo": float(edges[b]),
                "hi": float(edges[b + 1]),
                "count": int(sel.sum()),
                "mae": float(err[sel].mean()) if sel.any() else None,
            }
        )
    return rows


def evaluate(
    test: Sequence[DriveSequence],
    concept_set: ConceptSet,
    params: ModelParams,
    config: ModelConfig,
    distance_cap: float = DISTANCE_CAP,
    predictions: dict[str, np.ndarray] | None = None,
) -> EvalReport:
    """MAE per task (and per magnitude bin) on a held-out split."""
    if not test:
        raise ParameterError("cannot evaluate on an empty split")
    preds = predictions if predictions is not None else predict_batch(test, concept_set, params, config)
    targets = np.array([s.targets for s in test])
    mae, bins, counts = {}, {}, {}
    for task in config.task_names:
        truth = targets[:, TARGET_INDEX[task]]
        pred = np.asarray(preds[task])
        if task == "distance":
            keep = distance_mask(test, distance_cap)
            truth, pred = truth[keep], pred[keep]
        counts[task] = int(truth.size)
        if truth.size == 0:
            mae[task] = float("nan")
            bins[task] = []
            continue
        err = np.abs(pred - truth)
        mae[task] = float(err.mean())
        bins[task] = binned_errors(truth, err, task)
    return EvalReport(mae, bins, counts)


# ---------------------------------------------------------------------------
# experiment drivers


def parse_sizes(sizes, k: int) -> list[int]:
    out = []
    for s in sizes:
        n = k if str(s).strip().lower() == "full" else int(s)
        if not 1 <= n <= k:
            raise ParameterError(f"bottleneck size {s} outside [1, {k}]")
        out.append(n)
    return out


def ablate_bottleneck(
    full_set: ConceptSet,
    sizes: Sequence,
    seeds: Sequence[int],
    sequences: Sequence[DriveSequence],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> list[dict]:
    """Train and test one model per (bottleneck size, subset seed).

    Only the concept subset changes between rows; split, initialization and
    batch order come from ``train_config.seed``.
    """
    train, val, test = split_dataset(sequences, seed=train_config.seed)
    rows = []
    for size, label in zip(parse_sizes(sizes, full_set.k), sizes):
        for seed in seeds:
            subset = subset_concepts(full_set, size, seed)
            cfg = model_config.with_concepts(subset.k)
            result = fit(train, val, subset, cfg, train_config)
            report = evaluate(test, subset, result.params, cfg, train_config.distance_cap)
            rows.append(
                {
                    "size": "full" if str(label).strip().lower() == "full" else size,
                    "seed": int(seed),
                    "a_mae": report.mae.get("angle", float("nan")),
                    "d_mae": report.mae.get("distance", float("nan")),
                }
            )
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "seed", "a_mae", "d_mae"])
        for r in rows:
            writer.writerow([r["size"], r["seed"], repr(r["a_mae"]), repr(r["d_mae"])])


BENCH_PRESETS = {"comma": 240, "nuscenes": 20}


def bench_inference(
    params: ModelParams,
    config: ModelConfig,
    frames: int = 240,
    runs: int = 100,
    warmup: int = 3,
    seed: int = 0,
) -> dict:
    """Wall-clock latency of one eval-mode forward on a ``frames``-long input.

    Features are generated up front, so timing excludes data processing.
    """
    if runs < 1:
        raise ParameterError("runs must be at least 1")
    rng = make_rng(seed, "bench")
    feats = rng.standard_normal((1, frames, config.input_dim))
    for _ in range(warmup):
        encode(feats, params, config)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        encode(feats, params, config)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {
        "frames": int(frames),
        "runs": int(runs),
        "median_s": float(np.median(times)),
        "mean_s": float(times.mean()),
        "throughput_per_s": float(1.0 / times.mean()),
    }
