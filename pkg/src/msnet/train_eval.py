"""Training loop over precomputed embeddings, early stopping, k-fold
cross-validation, the log-loss metric, and prediction export.

Each fold trains with minibatch Adam and monitors its held-out fold
after every epoch, keeping the parameters from the best epoch and
stopping once `patience` epochs pass without improvement. Everything is
seeded: shuffling, dropout, and per-fold child seeds are separate RNG
streams, so a (dataset, configs, seeds) triple reproduces results
bit-identically.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NumericError, TrainingDiverged, ValidationError
from .gap_data import derive_label, kfold_split
from .model import (
    ExampleInput,
    MsnetConfig,
    MsnetParams,
    backward,
    forward_batch,
    init_params,
)
from .numkit import AdamState, adam_step, derive_seed, make_rng

log = logging.getLogger(__name__)

_STREAM_SHUFFLE = 0x73687566  # "shuf"
_STREAM_DROPOUT = 0x64726F70  # "drop"
_STREAM_FOLD = 0x666F6C64  # "fold"
_STREAM_SPLIT = 0x73706C74  # "splt"

PREDICTION_HEADER = ("ID", "A", "B", "NEITHER")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters (defaults follow the feature-based
    training setup)."""

    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 4
    weight_decay: float = 0.0
    seed: int = 0
    eval_fraction: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class LabeledExample:
    """One training instance: doc id, model input, gold class index."""

    id: str
    input: ExampleInput
    label: int

    def __post_init__(self):
        if self.label not in (0, 1, 2):
            raise ValidationError(f"label must be 0, 1 or 2, got {self.label}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class FoldHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    @property
    def stopped_early(self):
        return 0 < len(self.epochs) and self.best_epoch < self.epochs[-1].epoch


@dataclass(frozen=True)
class CvReport:
    """Per-fold validation losses with their mean and sample std; the
    wall-clock time is informational and excluded from canonical JSON."""

    fold_losses: tuple[float, ...]
    mean: float
    std: float
    test_loss: float | None
    seconds: float

    @classmethod
    def from_losses(cls, fold_losses, test_loss=None, seconds=0.0) -> "CvReport":
        losses = tuple(float(v) for v in fold_losses)
        if len(losses) < 2:
            raise ValidationError("a CV report needs at least two folds")
        return cls(
            fold_losses=losses,
            mean=float(np.mean(losses)),
            std=float(np.std(losses, ddof=1)),
            test_loss=None if test_loss is None else float(test_loss),
            seconds=float(seconds),
        )

    def canonical_json(self) -> str:
        """Deterministic report serialization: no timing, sorted keys."""
        payload = {
            "fold_losses": list(self.fold_losses),
            "mean": self.mean,
            "std": self.std,
            "test_loss": self.test_loss,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class CvResult:
    report: CvReport
    fold_params: list[MsnetParams]
    fold_histories: list[FoldHistory]
    assignment: dict[str, int]
    fold_configs: list[MsnetConfig] = field(default_factory=list)
    test_probs: np.ndarray | None = None


# --- metric ----------------------------------------------------------------------


def log_loss(probs, labels) -> float:
    """Mean over examples of -ln p_true, probs clipped to
    [1e-15, 1 - 1e-15]; rows must already sum to 1 within 1e-6."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ValidationError("probs must have shape (n, 3)")
    if labels.shape != (probs.shape[0],):
        raise ValidationError(
            f"{probs.shape[0]} prob rows but {labels.shape} labels"
        )
    if probs.shape[0] == 0:
        raise ValidationError("log_loss needs at least one example")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValidationError("probability rows must sum to 1 within 1e-6")
    labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels > 2):
        raise ValidationError("labels must lie in [0, 3)")
    clipped = np.clip(probs, 1e-15, 1.0 - 1e-15)
    return float(-np.log(clipped[np.arange(len(labels)), labels]).mean())


# --- dataset assembly --------------------------------------------------------------


def assemble_examples(docs, embeddings_by_id) -> dict[str, ExampleInput]:
    """Pair each tokenized doc with its embeddings; missing ids abort."""
    out = {}
    for doc in docs:
        emb = embeddings_by_id.get(doc.doc_id)
        if emb is None:
            raise ValidationError(f"no embeddings for doc {doc.doc_id!r}")
        out[doc.doc_id] = ExampleInput.from_doc(doc, emb)
    return out


def labeled_dataset(records, examples_by_id) -> list[LabeledExample]:
    out = []
    for record in records:
        ex = examples_by_id.get(record.id)
        if ex is None:
            raise ValidationError(f"no example input for record {record.id!r}")
        out.append(LabeledExample(id=record.id, input=ex, label=int(derive_label(record))))
    return out


def split_eval(dataset, fraction: float, seed: int):
    """Seeded shuffle split into (train, val); val gets ceil(n*fraction),
    at least 1, and train keeps at least 2 examples."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("eval fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = max(1, int(np.ceil(n * fraction)))
    if n - n_val < 2:
        raise ValidationError(f"{n} examples leave no training data after the split")
    order = make_rng(seed, _STREAM_SPLIT).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [dataset[i] for i in range(n) if i not in val_idx]
    val = [dataset[i] for i in range(n) if i in val_idx]
    return train, val


# --- training ------------------------------------------------------------------------


def predict_probs(examples, params: MsnetParams, config: MsnetConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, shape (n, 3)."""
    if not examples:
        raise ValidationError("predict_probs needs at least one example")
    rows = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        _, probs, _ = forward_batch(chunk, params, config, training=False)
        rows.append(probs)
    return np.concatenate(rows, axis=0)


def train_fold(
    train,
    val,
    model_config: MsnetConfig,
    train_config: TrainConfig,
    initial: MsnetParams | None = None,
):
    """Minibatch Adam with per-epoch validation; returns the parameters
    of the best epoch and the full history. `initial` overrides the
    seeded initialization (useful for warm starts and contract tests)."""
    if len(train) < 2:
        raise ValidationError("training needs at least two examples")
    if not val:
        raise ValidationError("validation set must be non-empty")
    params = initial.copy() if initial is not None else init_params(model_config)
    opt_states = [AdamState.for_parameter(p) for p in params.all_parameters()]
    shuffle_rng = make_rng(train_config.seed, _STREAM_SHUFFLE)
    dropout_rng = make_rng(train_config.seed, _STREAM_DROPOUT)

    val_inputs = [ex.input for ex in val]
    val_labels = [ex.label for ex in val]

    history = FoldHistory()
    best_params = None
    stale = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        loss_sum = 0.0
        seen = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            if len(batch) == 1:
                continue  # batchnorm needs >= 2 rows; the loner waits for reshuffling
            inputs = [train[i].input for i in batch]
            labels = [train[i].label for i in batch]
            try:
                _, _, cache = forward_batch(
                    inputs, params, model_config, training=True, rng=dropout_rng
                )
                params.zero_grads()
                loss, _ = backward(cache, labels)
            except NumericError as err:
                raise TrainingDiverged(
                    f"non-finite values in epoch {epoch}: {err}", history.epochs
                ) from err
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}", history.epochs
                )
            loss_sum += loss * len(batch)
            seen += len(batch)
            for p, state in zip(params.all_parameters(), opt_states):
                adam_step(
                    p,
                    state,
                    lr=train_config.lr,
                    weight_decay=train_config.weight_decay,
                )
        val_loss = log_loss(predict_probs(val_inputs, params, model_config), val_labels)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite val loss in epoch {epoch}", history.epochs)
        train_loss = loss_sum / seen if seen else float("nan")
        history.epochs.append(EpochStats(epoch, train_loss, val_loss))
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    return best_params, history


def ensemble_probs(prob_rows) -> np.ndarray:
    """Arithmetic mean of model probability matrices, renormalized so
    every row sums to exactly 1."""
    stacked = np.asarray(prob_rows, dtype=np.float64)
    if stacked.ndim != 3:
        raise ValidationError("expected (models, examples, 3) probabilities")
    mean = stacked.mean(axis=0)
    return mean / mean.sum(axis=1, keepdims=True)


def _fold_job(job):
    """Train one fold; top-level so process pools can pickle it."""
    train, val, model_cfg, train_cfg = job
    return train_fold(train, val, model_cfg, train_cfg)


def cross_validate(
    dataset,
    model_config: MsnetConfig,
    train_config: TrainConfig,
    k: int = 5,
    test=None,
    parallel_folds: int = 1,
):
    """Stratified k-fold training; each fold's held-out split doubles as
    the early-stopping monitor. With a test set, the k models' averaged
    probabilities are scored too. Folds are independent, so up to
    `parallel_folds` of them may train in worker processes; results are
    identical either way."""
    if parallel_folds < 1:
        raise ConfigError(f"parallel_folds must be >= 1, got {parallel_folds}")
    started = time.perf_counter()
    fold_of = kfold_split([(ex.id, ex.label) for ex in dataset], k, seed=train_config.seed)
    jobs = []
    for fold in range(k):
        train = [ex for ex in dataset if fold_of.assignment[ex.id] != fold]
        val = [ex for ex in dataset if fold_of.assignment[ex.id] == fold]
        fold_model_cfg = replace(
            model_config, seed=derive_seed(model_config.seed, _STREAM_FOLD, fold)
        )
        fold_train_cfg = replace(
            train_config, seed=derive_seed(train_config.seed, _STREAM_FOLD, fold)
        )
        jobs.append((train, val, fold_model_cfg, fold_train_cfg))
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=min(parallel_folds, k)) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(job) for job in jobs]

    fold_params = []
    fold_histories = []
    fold_losses = []
    for fold, (params, history) in enumerate(results):
        log.info(
            "fold %d/%d: best epoch %d, val loss %.6f",
            fold + 1, k, history.best_epoch, history.best_val_loss,
        )
        fold_params.append(params)
        fold_histories.append(history)
        fold_losses.append(history.best_val_loss)

    test_loss = None
    test_probs = None
    if test:
        test_inputs = [ex.input for ex in test]
        per_model = [
            predict_probs(test_inputs, params, model_config) for params in fold_params
        ]
        test_probs = ensemble_probs(per_model)
        test_loss = log_loss(test_probs, [ex.label for ex in test])

    report = CvReport.from_losses(
        fold_losses, test_loss=test_loss, seconds=time.perf_counter() - started
    )
    return CvResult(
        report=report,
        fold_params=fold_params,
        fold_histories=fold_histories,
        assignment=dict(fold_of.assignment),
        fold_configs=[job[2] for job in jobs],
        test_probs=test_probs,
    )


# --- prediction export -----------------------------------------------------------------


def predict_csv(models, model_config: MsnetConfig, examples, out) -> np.ndarray:
    """Write the submission CSV (header ID,A,B,NEITHER) for an ensemble;
    `examples` are (id, ExampleInput) pairs. Returns the probabilities."""
    ids = [rid for rid, _ in examples]
    inputs = [ex for _, ex in examples]
    if not models:
        raise ValidationError("predict_csv needs at least one model")
    probs = ensemble_probs([predict_probs(inputs, m, model_config) for m in models])
    out.write(",".join(PREDICTION_HEADER) + "\n")
    for rid, row in zip(ids, probs):
        cells = ",".join(repr(float(v)) for v in row)
        out.write(f"{rid},{cells}\n")
    return probs
