"""Four-class mass-shape classifier on binary masks, trained with a
class-weighted cross-entropy under stratified k-fold cross-validation.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, Dense, Module, init_he, name_parameters
from .autodiff.optim import RMSProp
from .autodiff.tensor import Tensor
from .errors import BuildError, ConfigurationError, ContractViolation, NonFiniteError
from .imaging import as_mask, resize_bilinear
from .metrics import confusion_matrix
from .phantom import SHAPE_LABELS

log = logging.getLogger(__name__)

PUBLISHED_CLASSIFIER_PARAMS = 767_684
EPS = 1e-7


@dataclass
class ClassifierSpec:
    input_size: int = 64
    filters: Tuple[int, int, int] = (64, 128, 256)
    kernels: Tuple[int, int, int] = (9, 5, 4)
    pool: int = 4
    hidden: int = 128
    dropout: float = 0.5
    n_classes: int = len(SHAPE_LABELS)

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.kernels = tuple(int(k) for k in self.kernels)
        if len(self.filters) != 3 or len(self.kernels) != 3:
            raise ConfigurationError("classifier needs three conv stages")
        if self.kernels[0] % 2 == 0 or self.kernels[1] % 2 == 0:
            raise ConfigurationError("same-padded kernels must be odd")
        trace = self.spatial_trace()
        if trace[-1] != 1:
            raise ConfigurationError(f"spatial trace {trace} does not end at 1x1")

    def spatial_trace(self) -> List[int]:
        s = self.input_size
        trace = [s, s]
        s //= self.pool
        trace += [s, s]
        s //= self.pool
        trace += [s, s - self.kernels[2] + 1]
        return trace

    def expected_parameter_count(self) -> int:
        f1, f2, f3 = self.filters
        k1, k2, k3 = self.kernels
        return (k1 * k1 * f1 + k2 * k2 * f1 * f2 + k3 * k3 * f2 * f3
                + f3 * self.hidden + self.hidden + self.hidden * self.n_classes + self.n_classes)


class ShapeClassifier(Module):
    def __init__(self, spec: ClassifierSpec, dtype=np.float32):
        self.spec = spec
        (f1, f2, f3), (k1, k2, k3) = spec.filters, spec.kernels
        self.cv1 = Conv2d(1, f1, k1, 1, k1 // 2, bias=False, dtype=dtype)
        self.cv2 = Conv2d(f1, f2, k2, 1, k2 // 2, bias=False, dtype=dtype)
        self.cv3 = Conv2d(f2, f3, k3, 1, 0, bias=False, dtype=dtype)
        self.fc1 = Dense(f3, spec.hidden, dtype=dtype)
        self.fc2 = Dense(spec.hidden, spec.n_classes, dtype=dtype)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities (N, n_classes); dropout only in training mode."""
        p = self.spec.pool
        h = F.maxpool2d(F.relu(self.cv1(x)), p, p)
        h = F.maxpool2d(F.relu(self.cv2(h)), p, p)
        h = F.flatten(F.relu(self.cv3(h)))
        h = F.relu(self.fc1(h))
        h = F.dropout(h, self.spec.dropout, rng, self.training)
        return F.softmax_rows(self.fc2(h))


def build_classifier(spec: ClassifierSpec = None, rng: Optional[np.random.Generator] = None,
                     dtype=np.float32) -> ShapeClassifier:
    spec = spec or ClassifierSpec()
    net = ShapeClassifier(spec, dtype)
    name_parameters(net, "cls")
    init_he(net, rng if rng is not None else np.random.default_rng(0))
    count = net.num_parameters()
    table = "\n".join(f"  {n:20s} {str(s):20s} {c:>8d}" for n, s, c in net.parameter_table())
    if count != spec.expected_parameter_count():
        raise BuildError(f"classifier has {count} parameters, plan says "
                         f"{spec.expected_parameter_count()}:\n{table}")
    if spec == ClassifierSpec() and count != PUBLISHED_CLASSIFIER_PARAMS:
        raise BuildError(f"classifier has {count} parameters, expected {PUBLISHED_CLASSIFIER_PARAMS}:\n{table}")
    return net


# -- loss ------------------------------------------------------------------------

def class_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c = 1 - n_c / N."""
    n = np.asarray(counts, dtype=np.float64)
    if np.any(n < 0) or n.sum() <= 0:
        raise ContractViolation(f"class counts must be nonnegative with a positive total, got {list(counts)}")
    return 1.0 - n / n.sum()


def weighted_cross_entropy(probs: Tensor, labels, weights, eps: float = EPS) -> Tensor:
    """mean over the batch of -w[label] * log(p[label] + eps)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ContractViolation(f"need one label per row, got {labels.shape} for {probs.shape}")
    sel = np.zeros((n, c), dtype=probs.dtype)
    sel[np.arange(n), labels] = np.asarray(weights, dtype=np.float64)[labels]
    return -((probs + eps).log() * Tensor(sel)).sum() / n


# -- folds -----------------------------------------------------------------------

@dataclass
class FoldPlan:
    assignment: np.ndarray
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def splits(self):
        for f in range(self.k):
            yield self.train_indices(f), self.test_indices(f)


def stratified_kfold(labels, k: int = 5, rng: Optional[np.random.Generator] = None) -> FoldPlan:
    """Shuffle each class, then deal its members round-robin over the folds.

    The dealing position carries over between classes so fold sizes stay
    within one sample of each other as well.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    assignment = np.full(labels.size, -1, dtype=np.int64)
    pos = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise ConfigurationError(f"class {SHAPE_LABELS[c] if c < len(SHAPE_LABELS) else c} has "
                                     f"{members.size} samples, fewer than k={k}")
        members = rng.permutation(members)
        assignment[members] = (pos + np.arange(members.size)) % k
        pos = (pos + members.size) % k
    if np.unique(labels).size < 2:
        raise ConfigurationError("stratified folds need at least two classes")
    return FoldPlan(assignment, k)


# -- training --------------------------------------------------------------------

@dataclass
class ClassifierTrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    alpha: float = 0.9
    rms_eps: float = 1e-7
    batch_size: int = 16
    epochs: int = 50
    folds: int = 5
    seed: int = 0
    eps: float = EPS

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.folds < 2:
            raise ConfigurationError("batch_size >= 1, epochs >= 0 and folds >= 2 required")


def prepare_masks(masks, size: int = 64) -> np.ndarray:
    """Resize masks to size x size {0,1} float32 stack shaped (N, 1, size, size)."""
    out = []
    for m in masks:
        m = as_mask(m)
        if m.shape != (size, size):
            m = resize_bilinear(m, size, size)
        out.append(m.astype(np.float32))
    return np.stack(out)[:, None]


@dataclass
class ClassifierState:
    model: ShapeClassifier
    opt: RMSProp
    cfg: ClassifierTrainConfig
    weights: np.ndarray
    rng: np.random.Generator
    epoch: int = 0
    history: List[dict] = field(default_factory=list)


def new_classifier_state(cfg: ClassifierTrainConfig, spec: ClassifierSpec, counts, seed: int,
                         dtype=np.float32) -> ClassifierState:
    model = build_classifier(spec, np.random.default_rng([seed, 1]), dtype)
    opt = RMSProp(model.parameters(), lr=cfg.lr, alpha=cfg.alpha, momentum=cfg.momentum, eps=cfg.rms_eps)
    return ClassifierState(model, opt, cfg, class_weights(counts), np.random.default_rng([seed, 2]))


def classifier_epoch(x: np.ndarray, y: np.ndarray, state: ClassifierState) -> float:
    m, cfg = state.model, state.cfg
    m.train()
    order = state.rng.permutation(len(x))
    total, seen = 0.0, 0
    for i in range(0, len(x), cfg.batch_size):
        idx = order[i : i + cfg.batch_size]
        m.zero_grad()
        loss = weighted_cross_entropy(m(Tensor(x[idx]), state.rng), y[idx], state.weights, cfg.eps)
        v = float(loss.data)
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite weighted cross-entropy at epoch {state.epoch + 1}: {v}")
        loss.backward()
        state.opt.step()
        total += v * len(idx)
        seen += len(idx)
    state.epoch += 1
    row = {"epoch": state.epoch, "loss": total / max(seen, 1)}
    state.history.append(row)
    return row["loss"]


def predict_proba(model: ShapeClassifier, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [model(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
    model.train()
    return np.concatenate(out).astype(np.float64)


def classify_mask(model: ShapeClassifier, mask) -> Tuple[str, np.ndarray]:
    """Argmax label and softmax row; dropout is off so the result is deterministic."""
    probs = predict_proba(model, prepare_masks([mask], model.spec.input_size))[0]
    return SHAPE_LABELS[int(np.argmax(probs))], probs


@dataclass
class FoldResult:
    fold: int
    test_indices: np.ndarray
    truth: np.ndarray
    probs: np.ndarray
    confusion: np.ndarray
    model: ShapeClassifier
    history: List[dict]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def train_fold(x: np.ndarray, y: np.ndarray, train_idx, test_idx, fold: int,
               cfg: ClassifierTrainConfig, spec: ClassifierSpec) -> FoldResult:
    counts = np.bincount(y[train_idx], minlength=spec.n_classes)
    state = new_classifier_state(cfg, spec, counts, cfg.seed + fold, x.dtype)
    for _ in range(cfg.epochs):
        loss = classifier_epoch(x[train_idx], y[train_idx], state)
        log.debug("fold %d epoch %d loss %.4f", fold, state.epoch, loss)
    probs = predict_proba(state.model, x[test_idx])
    cm = confusion_matrix(y[test_idx], probs.argmax(axis=1), spec.n_classes)
    return FoldResult(fold, np.asarray(test_idx), y[test_idx], probs, cm, state.model, state.history)


def _fold_job(payload) -> FoldResult:
    return train_fold(*payload)


def train_classifier(masks, labels, spec: ClassifierSpec = None, cfg: ClassifierTrainConfig = None,
                     plan: Optional[FoldPlan] = None, workers: int = 0) -> List[FoldResult]:
    """Stratified k-fold training; fold f trains with seed cfg.seed + f.

    With ``workers`` > 1 the folds run in that many processes.  Each fold
    owns its seeds, so the results do not depend on the worker count.
    """
    spec = spec or ClassifierSpec()
    cfg = cfg or ClassifierTrainConfig()
    y = np.asarray(labels, dtype=np.int64)
    x = prepare_masks(masks, spec.input_size)
    plan = plan or stratified_kfold(y, cfg.folds, np.random.default_rng([cfg.seed, 0]))
    jobs = [(x, y, tr, te, f, cfg, spec) for f, (tr, te) in enumerate(plan.splits())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    for r in results:
        log.info("fold %d accuracy %.3f", r.fold, np.trace(r.confusion) / len(r.truth))
    return results


def pooled_confusion(results: Sequence[FoldResult]) -> np.ndarray:
    return sum(r.confusion for r in results)


def pooled_scores(results: Sequence[FoldResult]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([r.probs for r in results]), np.concatenate([r.truth for r in results]))


def classifier_gradcheck(seed: int = 0, max_entries: int = 12) -> float:
    """Weighted cross-entropy gradient check on a reduced float64 network
    (8/16/32 filters, 16x16 input, 2x2 pools so the 4x4 valid conv still ends at 1x1).

    Thousands of relu inputs make it impossible to keep every one clear of
    zero, so probes whose +h / -h evaluations switch a relu or pool branch
    are skipped instead.
    """
    from .autodiff.gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    spec = ClassifierSpec(input_size=16, filters=(8, 16, 32), pool=2, hidden=16)
    net = build_classifier(spec, rng, np.float64)
    net.eval()
    x = Tensor(rng.uniform(0, 1, (3, 1, 16, 16)))
    y = rng.integers(0, 4, 3)
    w = class_weights([3, 5, 2, 4])
    return check_gradients(lambda: weighted_cross_entropy(net(x), y, w), net.parameters(),
                           max_entries=max_entries, rng=rng, skip_kinks=True)
