"""Balanced-batch multi-head training with early stopping, and the elastic-net LR baseline."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .corpus import DEFAULT_TAGS, DocumentRecord, targets_for
from .evaluation import roc_auc
from .hashing import featurize_sparse
from .models import FLAT_INPUT_VARIANTS, MALICIOUS_HEAD, ArchConfig, Detector, LogisticBoT, prepare_inputs
from .nncore import AdamState, adam_step, sigmoid

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    """Featurised documents ready for batching.

    ``chunked`` holds the 16x1024 chunk counts rasterised per row and
    ``flat`` the 16384-bin whole-document bag; both are sparse.
    """

    chunked: sp.csr_matrix
    flat: sp.csr_matrix
    targets: np.ndarray  # (N, heads) in {0, 1}
    mask: np.ndarray  # (N, heads) 1 where the target is known
    hashes: List[str] = field(default_factory=list)
    n_leaves: int = 16

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.targets[:, MALICIOUS_HEAD].astype(np.int64)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(self.chunked[idx], self.flat[idx], self.targets[idx], self.mask[idx],
                          [self.hashes[i] for i in idx] if self.hashes else [], self.n_leaves)

    def inputs(self, tag: str, idx=None, dtype=np.float64) -> np.ndarray:
        rows = slice(None) if idx is None else idx
        if tag in FLAT_INPUT_VARIANTS:
            return prepare_inputs(tag, flat=self.flat[rows].toarray(), dtype=dtype).array
        dense = self.chunked[rows].toarray()
        chunked = dense.reshape(dense.shape[0], self.n_leaves, -1)
        return prepare_inputs(tag, chunked=chunked, dtype=dtype).array


def build_feature_set(records: Sequence[DocumentRecord], root=None, pool=None,
                      registry: Sequence[str] = DEFAULT_TAGS) -> FeatureSet:
    """Featurise every record's content; ``root`` resolves relative content paths."""
    chunked, flat, _ = featurize_sparse((r.read(root) for r in records), pool=pool)
    n_heads = 1 + len(registry)
    targets = np.zeros((len(records), n_heads))
    mask = np.zeros((len(records), n_heads))
    for i, r in enumerate(records):
        targets[i], mask[i] = targets_for(r, registry)
    return FeatureSet(chunked, flat, targets, mask, [r.sha256 for r in records])


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    metric: str = "auc_head0"
    eval_batch: int = 256
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even so each class fills half a batch")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.metric != "auc_head0":
            raise ValueError(f"unsupported validation metric {self.metric!r}")


def balanced_batches(labels: Sequence[int], batch_size: int = 64,
                     seed: Union[int, np.random.Generator] = 0) -> Iterator[np.ndarray]:
    """One epoch of index batches, each half malicious and half benign.

    The majority class is visited in a fresh permutation (wrapping on the
    last batch); the minority class is drawn uniformly with replacement.
    """
    labels = np.asarray(labels)
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be even")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced batches need both malicious and benign examples")
    half = batch_size // 2
    major, minor = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    n_batches = math.ceil(len(major) / half)
    order = rng.permutation(major)
    order = np.resize(order, n_batches * half)
    for b in range(n_batches):
        maj = order[b * half:(b + 1) * half]
        mnr = minor[rng.integers(0, len(minor), size=half)]
        if major is pos:
            yield np.concatenate([maj, mnr])
        else:
            yield np.concatenate([mnr, maj])


def predict(model: Detector, data: FeatureSet, batch: int = 256, dtype=np.float64) -> np.ndarray:
    """Inference-mode head probabilities for every document."""
    out = []
    for start in range(0, len(data), batch):
        idx = np.arange(start, min(start + batch, len(data)))
        out.append(sigmoid(model.logits(data.inputs(model.tag, idx, dtype))))
    if not out:
        return np.zeros((0, model.config.n_heads))
    return np.concatenate(out, axis=0)


def validation_score(model: Detector, data: FeatureSet, batch: int = 256, dtype=np.float64) -> float:
    probs = predict(model, data, batch, dtype)
    return roc_auc(probs[:, MALICIOUS_HEAD], data.labels)


@dataclass
class TrainResult:
    model: Detector
    history: List[dict]
    best_epoch: int
    best_metric: float


def train(model: Detector, train_set: FeatureSet, val_set: FeatureSet,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam on the masked multi-head BCE with early stopping on validation AUC.

    The returned model carries the parameters of the best validation epoch.
    """
    if train_set.hashes and val_set.hashes and set(train_set.hashes) & set(val_set.hashes):
        raise ValueError("train and validation sets share documents")
    dtype = np.dtype(config.dtype)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    params = model.parameters()

    best_metric, best_epoch = -np.inf, 0
    best_params = {k: v.copy() for k, v in params.items()}
    history: List[dict] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for step, idx in enumerate(balanced_batches(train_set.labels, config.batch_size, batch_rng)):
            x = train_set.inputs(model.tag, idx, dtype)
            loss = model.loss_and_backward(x, train_set.targets[idx], train_set.mask[idx], drop_rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, step {step}")
            adam_step(params, model.gradients(), state)
            losses.append(loss)
        metric = validation_score(model, val_set, config.eval_batch, dtype)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": float(metric),
                  "wall_time": time.perf_counter() - t0}
        history.append(record)
        log.info("%s epoch %d loss %.5f val_auc %.5f", model.tag, epoch, record["train_loss"], metric)
        if metric > best_metric:
            best_metric, best_epoch, stale = metric, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_parameters(best_params)
    return TrainResult(model, history, best_epoch, float(best_metric))


def write_history(path: Union[str, Path], history: List[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_history(path: Union[str, Path]) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- elastic-net logistic regression -------------------------------------------------

DEFAULT_LAMBDAS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class ElasticNetGrid:
    l1: Tuple[float, ...] = DEFAULT_LAMBDAS
    l2: Tuple[float, ...] = DEFAULT_LAMBDAS

    def __post_init__(self):
        if not self.l1 or not self.l2:
            raise ValueError("elastic-net grid must be non-empty")
        if min(self.l1) < 0 or min(self.l2) < 0:
            raise ValueError("penalties must be non-negative")

    def points(self) -> List[Tuple[float, float]]:
        return list(itertools.product(self.l1, self.l2))


def soft_threshold(w: np.ndarray, t: float) -> np.ndarray:
    return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)


def _class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-example weights summing to one, each class carrying half the mass."""
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(int(len(labels) - labels.sum()), 1)
    return np.where(labels == 1, 0.5 / n_pos, 0.5 / n_neg)


def _lipschitz(X: sp.spmatrix, sample_w: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Upper bound on the curvature of the weighted logistic loss (power iteration)."""
    Xa = sp.hstack([X, sp.csr_matrix(np.ones((X.shape[0], 1)))]).tocsr()
    Xw = sp.diags(np.sqrt(sample_w)) @ Xa
    v = np.random.default_rng(seed).standard_normal(Xa.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = Xw.T @ (Xw @ v)
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            break
        v = u / lam
    # margin for the finite power iteration
    return 0.25 * lam * 1.05 + 1e-12


def fit_elastic_net(X: sp.spmatrix, targets: np.ndarray, mask: np.ndarray, l1: float, l2: float,
                    max_iter: int = 300, tol: float = 1e-7, lipschitz: Optional[float] = None,
                    init: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Accelerated proximal gradient (FISTA) for the class-balanced elastic-net logistic loss.

    Minimises ``sum_i w_i * mean_known_heads BCE + l2/2 ||W||^2 + l1 ||W||_1``
    over ``W`` (heads x features) and an unpenalised bias. The L1 term is
    handled by soft thresholding, so weights become exactly zero.
    """
    X = sp.csr_matrix(X)
    n, d = X.shape
    k = targets.shape[1]
    labels = targets[:, MALICIOUS_HEAD]
    sample_w = _class_weights(labels)
    known = mask.sum(axis=1, keepdims=True)
    if np.any(known == 0):
        raise ValueError("every example needs at least one known head")
    coef = sample_w[:, None] * mask / known
    L = (lipschitz if lipschitz is not None else _lipschitz(X, sample_w)) + l2
    step = 1.0 / L

    W = np.zeros((k, d)) if init is None else init[0].copy()
    b = np.zeros(k) if init is None else init[1].copy()
    Wy, by, t = W.copy(), b.copy(), 1.0
    for _ in range(max_iter):
        p = sigmoid(X @ Wy.T + by)
        G = coef * (p - targets)
        gW = (X.T @ G).T + l2 * Wy
        gb = G.sum(axis=0)
        W_new = soft_threshold(Wy - step * gW, step * l1)
        b_new = by - step * gb
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_new
        delta = max(np.abs(W_new - W).max(initial=0.0), np.abs(b_new - b).max(initial=0.0))
        Wy = W_new + mom * (W_new - W)
        by = b_new + mom * (b_new - b)
        W, b, t = W_new, b_new, t_new
        if delta < tol:
            break
    return W, b


def lr_model_from(W: np.ndarray, b: np.ndarray, config: ArchConfig = ArchConfig()) -> LogisticBoT:
    model = LogisticBoT(config)
    model.head.weight[...] = W
    model.head.bias[...] = b
    return model


@dataclass
class GridResult:
    model: LogisticBoT
    l1: float
    l2: float
    scores: Dict[Tuple[float, float], float]


def train_lr_bot(grid: ElasticNetGrid, train_set: FeatureSet, val_set: FeatureSet,
                 config: ArchConfig = ArchConfig(), max_iter: int = 300,
                 warm_start: bool = True) -> GridResult:
    """Fit every grid point and keep the one with the best validation AUC (first wins ties).

    With ``warm_start`` each L2 setting is swept from the largest L1 penalty
    down, every fit starting from the previous solution.
    """
    X = sp.csr_matrix(train_set.flat, dtype=np.float64)
    L0 = _lipschitz(X, _class_weights(train_set.labels))
    scores: Dict[Tuple[float, float], float] = {}
    fitted: Dict[Tuple[float, float], LogisticBoT] = {}
    for l2 in grid.l2:
        init = None
        for l1 in sorted(grid.l1, reverse=True):
            W, b = fit_elastic_net(X, train_set.targets, train_set.mask, l1, l2, max_iter,
                                   lipschitz=L0, init=init)
            init = (W, b) if warm_start else None
            model = lr_model_from(W, b, config)
            scores[(l1, l2)] = validation_score(model, val_set)
            fitted[(l1, l2)] = model
            log.info("lr_bot l1=%g l2=%g val_auc %.5f nnz %d", l1, l2, scores[(l1, l2)],
                     int((W != 0).sum()))
    best = None
    for point in grid.points():
        if best is None or scores[point] > scores[best]:
            best = point
    return GridResult(fitted[best], best[0], best[1], {p: scores[p] for p in grid.points()})
