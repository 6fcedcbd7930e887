"""Desk-scale experiment runners on phantom data.

These back the acceptance tests and the demo scripts: a segmentation run,
the paired dice-vs-L1 comparison, the k-fold shape study and the
determinism checks.  Each returns plain results; nothing here prints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ck
from .imaging import resize_bilinear
from .metrics import confusion_matrix, overall_accuracy, roc_auc
from .phantom import SHAPE_LABELS, PhantomSpec, generate
from .report import curves_svg, write_csv
from .seggan import (DiscriminatorSpec, GanTrainConfig, GeneratorSpec, SegSample,
                     evaluate_segmentation, new_gan_state, train_gan)
from .shapecnn import (ClassifierSpec, ClassifierTrainConfig, FoldResult, pooled_confusion,
                       pooled_scores, train_classifier)


def phantom_split(size: int, n_train: int, n_test: int, seed: int = 0) -> Tuple[List[SegSample], List[SegSample]]:
    """Balanced phantom set, first ``n_train`` samples for training, rest for test."""
    total = n_train + n_test
    per, extra = divmod(total, len(SHAPE_LABELS))
    counts = tuple(per + (c < extra) for c in range(len(SHAPE_LABELS)))
    samples = [SegSample(p.roi, p.mask) for p in generate(PhantomSpec(size=size, counts=counts, seed=seed))]
    return samples[:n_train], samples[n_train:]


@dataclass
class SegRun:
    dice: np.ndarray
    iou: np.ndarray
    history: List[dict]
    checkpoint_dice: Dict[int, float]
    seconds: float
    state: object = field(repr=False, default=None)


def segmentation_run(train: Sequence[SegSample], test: Sequence[SegSample], base_filters: int = 8,
                     batch_size: int = 8, epochs: int = 40, seed: int = 0,
                     reconstruction_loss: str = "dice", checkpoints: Sequence[int] = (),
                     eval_seed: int = 12345) -> SegRun:
    """Train from scratch and score the test set after morph_cleanup.

    Test Dice is also recorded at every epoch listed in ``checkpoints``; each
    evaluation uses a fresh generator seeded with ``eval_seed`` so paired
    runs see the same dropout draws.
    """
    size = np.shape(train[0].roi)[0]
    cfg = GanTrainConfig(batch_size=batch_size, epochs=epochs, seed=seed,
                         reconstruction_loss=reconstruction_loss)
    state = new_gan_state(cfg, GeneratorSpec.for_input(size, base_filters=base_filters),
                          DiscriminatorSpec(base_filters=base_filters))
    marks: Dict[int, float] = {}
    wanted = set(checkpoints)

    def at_epoch(st, row):
        if st.epoch in wanted:
            scores = evaluate_segmentation(st.generator, test, np.random.default_rng(eval_seed))
            marks[st.epoch] = float(np.mean([d for d, _ in scores]))

    t0 = time.perf_counter()
    train_gan(train, state, callback=at_epoch)
    seconds = time.perf_counter() - t0
    scores = np.array(evaluate_segmentation(state.generator, test, np.random.default_rng(eval_seed)))
    return SegRun(scores[:, 0], scores[:, 1], state.history, marks, seconds, state)


@dataclass
class LossComparison:
    seeds: List[int]
    checkpoints: List[int]
    dice_runs: List[SegRun]
    l1_runs: List[SegRun]

    def margins(self) -> np.ndarray:
        """(seed, checkpoint) array of dice-variant minus L1-variant test Dice."""
        return np.array([[d.checkpoint_dice[c] - l.checkpoint_dice[c] for c in self.checkpoints]
                         for d, l in zip(self.dice_runs, self.l1_runs)])

    def write(self, out_dir) -> Dict[str, Path]:
        """Checkpoint table plus per-epoch loss curves (CSV and SVG)."""
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        rows = []
        for s, d, l in zip(self.seeds, self.dice_runs, self.l1_runs):
            for c in self.checkpoints:
                rows.append([s, c, d.checkpoint_dice[c], l.checkpoint_dice[c]])
        files = {"checkpoints": root / "dice_vs_l1_checkpoints.csv", "curves": root / "dice_vs_l1_loss.csv",
                 "svg": root / "dice_vs_l1_loss.svg"}
        write_csv(files["checkpoints"], ["seed", "epoch", "test_dice_dice_loss", "test_dice_l1_loss"], rows)
        curve_rows = []
        for s, d, l in zip(self.seeds, self.dice_runs, self.l1_runs):
            for hd, hl in zip(d.history, l.history):
                curve_rows.append([s, hd["epoch"], hd["gen_loss"], hd["dice_term"], hl["gen_loss"],
                                   hl["rec_term"], hl["dice_term"]])
        write_csv(files["curves"], ["seed", "epoch", "gen_loss_dice", "dice_term_dice", "gen_loss_l1",
                                    "l1_term_l1", "dice_term_l1"], curve_rows)
        mean_d = np.mean([[h["dice_term"] for h in r.history] for r in self.dice_runs], axis=0)
        mean_l = np.mean([[h["dice_term"] for h in r.history] for r in self.l1_runs], axis=0)
        epochs = [h["epoch"] for h in self.dice_runs[0].history]
        files["svg"].write_text(curves_svg(
            {"dice loss objective": list(zip(epochs, mean_d)), "L1 objective": list(zip(epochs, mean_l))},
            "training dice term (mean over seeds)", "epoch", "1 - Dice"))
        return files


def compare_reconstruction_losses(seeds: Sequence[int] = range(5), size: int = 64, n_train: int = 300,
                                  n_test: int = 60, base_filters: int = 8, batch_size: int = 8,
                                  epochs: int = 40, checkpoints: Sequence[int] = (10, 20, 30, 40),
                                  data_seed: int = 0) -> LossComparison:
    """Dice-loss and L1 generators trained under paired seeds on the same data."""
    train, test = phantom_split(size, n_train, n_test, data_seed)
    dice_runs, l1_runs = [], []
    for s in seeds:
        for kind, bucket in (("dice", dice_runs), ("l1", l1_runs)):
            run = segmentation_run(train, test, base_filters, batch_size, epochs, s, kind, checkpoints)
            run.state = None
            bucket.append(run)
    return LossComparison(list(seeds), list(checkpoints), dice_runs, l1_runs)


# -- shape classification ----------------------------------------------------------

@dataclass
class ShapeStudy:
    results: List[FoldResult]
    confusion: np.ndarray
    macro_accuracy: float
    auc: float
    seconds: float

    def dominant_confusion(self) -> Tuple[str, str, int]:
        """Class pair with the most errors in either direction."""
        m = self.confusion
        best = (0, 1, -1)
        for i in range(len(m)):
            for j in range(i + 1, len(m)):
                n = int(m[i, j] + m[j, i])
                if n > best[2]:
                    best = (i, j, n)
        return SHAPE_LABELS[best[0]], SHAPE_LABELS[best[1]], best[2]


def phantom_masks(per_class: int, size: int = 128, out_size: int = 64, seed: int = 0):
    ph = generate(PhantomSpec(size=size, counts=(per_class,) * 4, seed=seed))
    masks = [resize_bilinear(p.mask, out_size, out_size) if size != out_size else p.mask for p in ph]
    return masks, np.array([p.label for p in ph])


def shape_study(per_class: int = 200, folds: int = 5, epochs: int = 50, seed: int = 0,
                phantom_size: int = 128, data_seed: int = 1, workers: int = 0) -> ShapeStudy:
    masks, labels = phantom_masks(per_class, phantom_size, 64, data_seed)
    t0 = time.perf_counter()
    results = train_classifier(masks, labels, ClassifierSpec(),
                               ClassifierTrainConfig(epochs=epochs, folds=folds, seed=seed), workers=workers)
    seconds = time.perf_counter() - t0
    cm = pooled_confusion(results)
    scores, truth = pooled_scores(results)
    return ShapeStudy(results, cm, overall_accuracy(cm) / 100.0, roc_auc(scores, truth).auc, seconds)


# -- determinism -------------------------------------------------------------------

def gan_checkpoint_bytes(train: Sequence[SegSample], seed: int, epochs: int, path,
                         base_filters: int = 4, batch_size: int = 4, resume_at: Optional[int] = None) -> bytes:
    """Train ``epochs`` epochs and return the saved checkpoint bytes.

    With ``resume_at`` the run stops there, saves, reloads from disk and
    finishes in a fresh process-local state.
    """
    size = np.shape(train[0].roi)[0]
    cfg = GanTrainConfig(batch_size=batch_size, epochs=epochs, seed=seed)
    gspec = GeneratorSpec.for_input(size, base_filters=base_filters)
    state = new_gan_state(cfg, gspec, DiscriminatorSpec(base_filters=base_filters))
    path = Path(path)
    if resume_at is not None:
        train_gan(train, state, epochs=resume_at)
        ck.save_gan_state(state, path, "determinism")
        state = ck.load_gan_state(path, cfg, expected_hash="determinism")
    train_gan(train, state)
    ck.save_gan_state(state, path, "determinism")
    return path.read_bytes()


def classifier_checkpoint_bytes(masks, labels, seed: int, epochs: int, path, resume_at: Optional[int] = None) -> bytes:
    """Classifier analogue of :func:`gan_checkpoint_bytes` (one fold-free run on all data)."""
    from .shapecnn import classifier_epoch, new_classifier_state, prepare_masks

    cfg = ClassifierTrainConfig(epochs=epochs, seed=seed)
    x, y = prepare_masks(masks), np.asarray(labels)
    state = new_classifier_state(cfg, ClassifierSpec(), np.bincount(y, minlength=4), seed)
    path = Path(path)
    if resume_at is not None:
        while state.epoch < resume_at:
            classifier_epoch(x, y, state)
        ck.save_classifier_state(state, path, "determinism")
        state = ck.load_classifier_state(path, "determinism")
    while state.epoch < epochs:
        classifier_epoch(x, y, state)
    ck.save_classifier_state(state, path, "determinism")
    return path.read_bytes()
