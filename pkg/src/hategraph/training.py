"""Loss, optimizers, the training loop, metrics and evaluation protocols.

The protocols mirror how the classifier is meant to be assessed: stratified
5-fold cross-validation, repeated random 70/10/20 splits, and a four-arm
ablation harness (no graph, instance graph only, weight graph only, full)
that shares folds and seeds across arms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .featureio import DatasetManifest, SegmentFeatures, load_video_features
from .model import ForwardOutput, ModelConfig, ModelParams, forward, init_params

ABLATION_LABELS = {
    "no_graph": "No Graph",
    "instance_only": "Only Instance Graph",
    "weight_only": "Only Weight Graph",
    "full": "Full Model",
}
ABLATION_ORDER = ("no_graph", "instance_only", "weight_only", "full")

_CLAMP = 1e-12


class TrainingError(RuntimeError):
    """Training could not proceed (bad split, divergence, ...)."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    input_noise_std: float = 0.0  # train-time Gaussian augmentation on raw features
    split: tuple[float, float, float] = (0.70, 0.10, 0.20)
    class_weighting: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Loss

def cross_entropy(h_hat, h) -> ad.Tensor:
    """-sum_c h_c log(h_hat_c) with probabilities clamped at 1e-12."""
    target = np.asarray(h, dtype=np.float64)
    if target.shape not in ((2,), (1, 2)):
        raise ValueError(f"label must be a one-hot pair, got shape {target.shape}")
    flat = target.reshape(-1)
    if sorted(flat.tolist()) != [0.0, 1.0]:
        raise ValueError(f"label must be one-hot, got {flat.tolist()}")
    if not isinstance(h_hat, ad.Tensor):
        h_hat = ad.Tensor(np.asarray(h_hat, dtype=np.float64).reshape(1, 2),
                          dtype=np.float64)
    dtype = h_hat.dtype
    eps = ad.constant(np.full((1, 2), _CLAMP), dtype=dtype)
    clamped = ad.add(ad.relu(ad.sub(h_hat, eps)), eps)  # max(p, eps), same subgradient
    picked = ad.mul(ad.log(clamped), ad.constant(target.reshape(1, 2), dtype=dtype))
    return ad.scalar_mul(ad.row_sum(ad.transpose(ad.row_sum(picked))), -1.0)


def one_hot(label: int) -> np.ndarray:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    out = np.zeros(2)
    out[label] = 1.0
    return out


# ---------------------------------------------------------------------------
# Optimizers

class Sgd:
    def __init__(self, params: ModelParams, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            g = grads[name].astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * tensor.data
            new = (tensor.data - self.lr * g).astype(tensor.dtype)
            new.flags.writeable = False
            tensor.data = new


class Adam:
    """Bias-corrected first/second moment update, decoupled weight decay."""

    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, tensor in self.params.items():
            g = grads[name].astype(np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * tensor.data
            new = (tensor.data.astype(np.float64) - update).astype(tensor.dtype)
            new.flags.writeable = False
            tensor.data = new


def make_optimizer(params: ModelParams, config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(params, config.learning_rate, config.weight_decay)
    return Adam(params, config.learning_rate, config.adam_beta1,
                config.adam_beta2, config.adam_eps, config.weight_decay)


# ---------------------------------------------------------------------------
# Metrics

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        """Confusion counts with hate (y=1) as the positive class."""
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError("prediction/label lengths differ")
        tp = int(np.sum((y_true == 1) & (y_pred == 1)))
        fp = int(np.sum((y_true == 0) & (y_pred == 1)))
        tn = int(np.sum((y_true == 0) & (y_pred == 0)))
        fn = int(np.sum((y_true == 1) & (y_pred == 0)))
        total = tp + fp + tn + fn
        flags = []
        accuracy = (tp + tn) / total if total else 0.0
        if tp + fp:
            precision = tp / (tp + fp)
        else:
            precision, flags = 0.0, flags + ["precision_zero_denominator"]
        if tp + fn:
            recall = tp / (tp + fn)
        else:
            recall, flags = 0.0, flags + ["recall_zero_denominator"]
        if precision + recall:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1, flags = 0.0, flags + ["f1_zero_denominator"]
        return cls(tp=tp, fp=fp, tn=tn, fn=fn, accuracy=accuracy,
                   precision=precision, recall=recall, f1=f1, flags=tuple(flags))

    def as_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "flags": list(self.flags),
        }

    def row(self, name: str) -> str:
        return (f"{name} {self.accuracy:.3f} {self.f1:.3f} "
                f"{self.precision:.3f} {self.recall:.3f}")


# ---------------------------------------------------------------------------
# Dataset plumbing

@dataclass
class VideoRecord:
    video_id: str
    label: int
    features: SegmentFeatures


def load_records(manifest: DatasetManifest, expected_widths=None) -> list[VideoRecord]:
    """Materialize every video's features in manifest order."""
    records = []
    for entry in manifest.entries:
        feats = load_video_features(manifest, entry.video_id,
                                    expected_widths=expected_widths)
        records.append(VideoRecord(entry.video_id, entry.label, feats))
    return records


def labels_of(records) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# Splits

def stratified_kfold(labels, k: int, seed: int) -> list[np.ndarray]:
    """k disjoint folds, per-class counts within one sample of proportional."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ValueError(f"class {cls} has {idx.size} samples, fewer than k={k}")
        rng.shuffle(idx)
        for fold, chunk in enumerate(np.array_split(idx, k)):
            folds[fold].extend(chunk.tolist())
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def stratified_split(labels, fractions, seed: int):
    """Index triple (train, val, test) with per-class proportional counts."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n = idx.size
        n_test = int(round(fractions[2] * n))
        n_val = int(round(fractions[1] * n))
        n_train = n - n_val - n_test
        if min(n_train, n_test) < 0:
            raise ValueError("split fractions leave a class empty")
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train : n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val :].tolist())
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def train_val_split(labels, indices, train_frac: float, val_frac: float, seed: int):
    """Stratified split of a subset (used for the within-fold 70/10 share)."""
    indices = np.asarray(indices, dtype=np.int64)
    sub_labels = np.asarray(labels, dtype=np.int64)[indices]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AB5]))
    train, val = [], []
    rel = val_frac / (train_frac + val_frac)
    for cls in (0, 1):
        idx = indices[sub_labels == cls]
        rng.shuffle(idx)
        n_val = int(round(rel * idx.size))
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return (np.array(sorted(train), dtype=np.int64),
            np.array(sorted(val), dtype=np.int64))


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_f1: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    best_val_f1: float
    config: ModelConfig = field(repr=False, default=None)


def _augment(features: SegmentFeatures, std: float,
             rng: np.random.Generator) -> SegmentFeatures:
    def jitter(arr):
        return (arr + rng.normal(0.0, std, size=arr.shape)).astype(np.float32)

    return SegmentFeatures(visual=jitter(features.visual), audio=jitter(features.audio),
                           text=jitter(features.text))


def _video_loss_and_grads(record: VideoRecord, params: ModelParams,
                          config: ModelConfig, weight: float,
                          rng: np.random.Generator | None,
                          noise_std: float = 0.0):
    feats = record.features
    if noise_std > 0.0 and rng is not None:
        feats = _augment(feats, noise_std, rng)
    out = forward(feats, params, config, rng=rng if config.dropout > 0 else None)
    loss = cross_entropy(out.h_hat_tensor, one_hot(record.label))
    if weight != 1.0:
        loss = ad.scalar_mul(loss, weight)
    grads = ad.gradients(loss, [params[n] for n in params.names()])
    return loss.item(), dict(zip(params.names(), grads))


def _class_weights(records, train_idx) -> dict[int, float]:
    labels = labels_of(records)[train_idx]
    counts = {0: int(np.sum(labels == 0)), 1: int(np.sum(labels == 1))}
    total = counts[0] + counts[1]
    return {cls: total / (2.0 * counts[cls]) for cls in (0, 1)}


def train(records, model_config: ModelConfig, train_config: TrainConfig,
          train_idx=None, val_idx=None) -> TrainResult:
    """Mini-batch gradient descent on mean cross-entropy with early stopping.

    Keeps the parameters of the epoch with the best validation F1 and stops
    once `patience` consecutive epochs fail to improve it.  Fully seeded:
    identical inputs and seed reproduce the history bit for bit.
    """
    if not records:
        raise TrainingError("dataset is empty")
    labels = labels_of(records)
    if train_idx is None or val_idx is None:
        train_idx, val_idx, _ = stratified_split(labels, train_config.split,
                                                 train_config.seed)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(set(labels[train_idx].tolist())) < 2:
        raise TrainingError("training split contains a single class")
    if val_idx.size == 0:
        raise TrainingError("validation split is empty")

    params = init_params(model_config, seed=train_config.seed)
    optimizer = make_optimizer(params, train_config)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 0x0E0C]))
    needs_train_rng = model_config.dropout > 0 or train_config.input_noise_std > 0
    train_rng = (np.random.default_rng(np.random.SeedSequence([train_config.seed, 0xD0]))
                 if needs_train_rng else None)
    weights = _class_weights(records, train_idx) if train_config.class_weighting else {0: 1.0, 1: 1.0}

    history: list[EpochStats] = []
    best_f1 = -1.0
    best_epoch = -1
    best_params = params.copy()
    since_improvement = 0

    for epoch in range(train_config.max_epochs):
        order = train_idx.copy()
        shuffle_rng.shuffle(order)
        epoch_losses = []
        for start in range(0, order.size, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for i in batch:
                loss_value, grads = _video_loss_and_grads(
                    records[i], params, model_config, weights[records[i].label],
                    train_rng, train_config.input_noise_std,
                )
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"loss diverged (non-finite) at epoch {epoch}, video {records[i].video_id}"
                    )
                epoch_losses.append(loss_value)
                for name, g in grads.items():
                    acc[name] = g if name not in acc else acc[name] + g
            scale = 1.0 / batch.size
            optimizer.step({name: g * scale for name, g in acc.items()})
        val_metrics = evaluate(params, [records[i] for i in val_idx], model_config)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_accuracy=val_metrics.accuracy,
            val_f1=val_metrics.f1,
        )
        history.append(stats)
        if stats.val_f1 > best_f1:
            best_f1 = stats.val_f1
            best_epoch = epoch
            best_params = params.copy()
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement > train_config.patience:
                break
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch,
                       best_val_f1=best_f1, config=model_config)


def evaluate(params: ModelParams, records, model_config: ModelConfig) -> Metrics:
    """Argmax predictions against labels; hate (1) is the positive class."""
    if not records:
        raise ValueError("cannot evaluate on an empty split")
    y_true = [r.label for r in records]
    y_pred = [forward(r.features, params, model_config).predicted_label for r in records]
    return Metrics.from_predictions(y_true, y_pred)


def predict(params: ModelParams, features: SegmentFeatures,
            model_config: ModelConfig) -> ForwardOutput:
    return forward(features, params, model_config)


# ---------------------------------------------------------------------------
# Protocols

def _mean_metrics(per_run: list[Metrics]) -> dict:
    return {
        "accuracy": float(np.mean([m.accuracy for m in per_run])),
        "f1": float(np.mean([m.f1 for m in per_run])),
        "precision": float(np.mean([m.precision for m in per_run])),
        "recall": float(np.mean([m.recall for m in per_run])),
    }


@dataclass
class CVReport:
    per_fold: list[Metrics]
    mean: dict

    def as_dict(self) -> dict:
        return {"per_fold": [m.as_dict() for m in self.per_fold], "mean": self.mean}

    def table(self) -> str:
        header = "run accuracy f1 precision recall"
        lines = [header]
        lines += [m.row(f"fold{i}") for i, m in enumerate(self.per_fold)]
        lines.append(
            f"mean {self.mean['accuracy']:.3f} {self.mean['f1']:.3f} "
            f"{self.mean['precision']:.3f} {self.mean['recall']:.3f}"
        )
        return "\n".join(lines)


def run_cv(records, model_config: ModelConfig, train_config: TrainConfig,
           k: int = 5) -> CVReport:
    """Stratified k-fold: each fold is the test set once, the rest splits
    into train/val at the 70/10 proportion."""
    labels = labels_of(records)
    folds = stratified_kfold(labels, k, train_config.seed)
    per_fold = []
    for fold_id, test_idx in enumerate(folds):
        rest = np.array(sorted(set(range(len(records))) - set(test_idx.tolist())),
                        dtype=np.int64)
        fold_seed = int(np.random.SeedSequence([train_config.seed, fold_id]).generate_state(1)[0])
        train_idx, val_idx = train_val_split(labels, rest, train_config.split[0],
                                             train_config.split[1], fold_seed)
        fold_train = replace(train_config, seed=fold_seed)
        result = train(records, model_config, fold_train, train_idx, val_idx)
        per_fold.append(evaluate(result.params, [records[i] for i in test_idx], model_config))
    return CVReport(per_fold=per_fold, mean=_mean_metrics(per_fold))


def run_repeated(records, model_config: ModelConfig, train_config: TrainConfig,
                 repeats: int = 5) -> CVReport:
    """Repeated random 70/10/20 splits, metrics averaged over runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    labels = labels_of(records)
    per_run = []
    for run in range(repeats):
        run_seed = int(np.random.SeedSequence([train_config.seed, 0x9E9, run]).generate_state(1)[0])
        run_train = replace(train_config, seed=run_seed)
        train_idx, val_idx, test_idx = stratified_split(labels, train_config.split, run_seed)
        result = train(records, model_config, run_train, train_idx, val_idx)
        per_run.append(evaluate(result.params, [records[i] for i in test_idx], model_config))
    return CVReport(per_fold=per_run, mean=_mean_metrics(per_run))


@dataclass
class AblationReport:
    rows: list[tuple[str, Metrics]]

    def as_dict(self) -> dict:
        return {label: m.as_dict() for label, m in self.rows}

    def table(self) -> str:
        lines = ["model accuracy f1 precision recall"]
        lines += [m.row(label) for label, m in self.rows]
        return "\n".join(lines)

    def metric(self, label: str, name: str) -> float:
        for row_label, m in self.rows:
            if row_label == label:
                return getattr(m, name)
        raise KeyError(label)


def run_ablation(records, base_config: ModelConfig, train_config: TrainConfig,
                 arms=ABLATION_ORDER) -> AblationReport:
    """Train every ablation arm on identical splits and seeds."""
    labels = labels_of(records)
    train_idx, val_idx, test_idx = stratified_split(labels, train_config.split,
                                                    train_config.seed)
    rows = []
    for arm in arms:
        if arm not in ABLATION_LABELS:
            raise ValueError(f"unknown ablation arm {arm!r}")
        config = replace(base_config, ablation=arm)
        result = train(records, config, train_config, train_idx, val_idx)
        metrics = evaluate(result.params, [records[i] for i in test_idx], config)
        rows.append((ABLATION_LABELS[arm], metrics))
    return AblationReport(rows=rows)


def write_report(path_prefix, text: str, payload: dict) -> None:
    """Dual-format report: aligned text next to machine-readable JSON."""
    from pathlib import Path

    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".txt").write_text(text + "\n")
    prefix.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
