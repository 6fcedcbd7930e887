"""``mammoseg`` command line: datasets, training, inference, evaluation.

Exit codes: 0 success, 1 invalid input (flags, config, files), 2 runtime
failure.  Everything random derives from the config seed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint as ck
from .config import RunConfig, load_config
from .dataset import Dataset, read_dataset, write_dataset
from .errors import ConfigurationError, ContractViolation, FormatError, MammosegError
from .imaging import (BoundingBox, as_mask, crop, loose_frame_from_tight, preprocess_roi,
                      read_pgm, resize_bilinear, write_pgm)
from .metrics import confusion_matrix, roc_auc
from .phantom import SHAPE_LABELS, PhantomSpec, generate_dataset
from .report import EvalReport, emit_report, write_csv, write_loss_csv, loss_svg

log = logging.getLogger("mammoseg")

SUBCOMMANDS = ("phantom-gen", "preprocess", "train-seg", "infer-seg", "train-shape",
               "infer-shape", "eval-seg", "eval-shape", "gradcheck", "pipeline")


class UsageError(MammosegError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mammoseg", description="Breast mass segmentation and shape classification.")
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    # SUPPRESS keeps a flag given before the command from being reset by the subparser
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--in", dest="inp", help="input dataset directory or file")
    common.add_argument("--seg-ckpt", help="segmentation GAN checkpoint (.mgck)")
    common.add_argument("--shape-ckpt", help="shape classifier checkpoint (.mgck)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "phantom-gen": "write a seeded synthetic dataset",
        "preprocess": "smooth, equalise, frame and resize a dataset",
        "train-seg": "train the segmentation GAN (resumes from --seg-ckpt)",
        "infer-seg": "segment every ROI of a dataset or a single PGM",
        "train-shape": "stratified k-fold training of the shape classifier",
        "infer-shape": "classify every mask of a dataset or a single PGM",
        "eval-seg": "Dice / IoU report against ground-truth masks",
        "eval-shape": "confusion matrix and ROC report against labels",
        "gradcheck": "finite-difference checks of every layer and both objectives",
        "pipeline": "segment one ROI, then classify the mask shape",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return p


# -- helpers -------------------------------------------------------------------

def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads() -> int:
    raw = os.environ.get("MAMMOSEG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"MAMMOSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigurationError("MAMMOSEG_THREADS must be >= 0")
    return n


def _inputs(path: str):
    """(names, arrays, is_dataset) from a dataset directory or one PGM file."""
    p = Path(path)
    if p.is_dir():
        return read_dataset(p), True
    img = read_pgm(p)
    return Dataset([p.name], [img], []), False


def _fit(img, size: int) -> np.ndarray:
    img = np.asarray(img)
    return img if img.shape == (size, size) else resize_bilinear(img, size, size)


def _seg_samples(ds: Dataset, size: int):
    from .seggan import SegSample

    if len(ds.masks) != len(ds.names):
        raise MammosegError("dataset has no masks/ directory")
    return [SegSample(_fit(img, size), _fit(as_mask(m), size)) for img, m in zip(ds.images, ds.masks)]


def _gan_hash(cfg: RunConfig) -> str:
    return ck.config_hash(cfg.training_identity("seg"))


def _shape_hash(cfg: RunConfig) -> str:
    return ck.config_hash(cfg.training_identity("shape"))


def _gan_config(cfg: RunConfig):
    from .seggan import GanTrainConfig

    s = cfg.seg
    return GanTrainConfig(lambda_dice=s.lambda_dice, reconstruction_loss=s.reconstruction_loss,
                          lr=s.lr, beta1=s.beta1, beta2=s.beta2, adam_eps=s.adam_eps,
                          batch_size=s.batch_size, epochs=s.epochs, seed=cfg.seed, eps=s.eps,
                          threshold=s.threshold)


def _shape_specs(cfg: RunConfig):
    from .shapecnn import ClassifierSpec, ClassifierTrainConfig

    s = cfg.shape
    spec = ClassifierSpec(input_size=s.input_size, dropout=s.dropout)
    tcfg = ClassifierTrainConfig(lr=s.lr, momentum=s.momentum, alpha=s.alpha, rms_eps=s.rms_eps,
                                 batch_size=s.batch_size, epochs=s.epochs, folds=s.folds,
                                 seed=cfg.seed, eps=s.eps)
    return spec, tcfg


# -- subcommands ---------------------------------------------------------------

def cmd_phantom_gen(args, cfg: RunConfig) -> int:
    p = cfg.phantom
    spec = PhantomSpec(size=p.size, contrast=p.contrast, noise=p.noise, counts=tuple(p.counts), seed=cfg.seed)
    out = _out_dir(args)
    generate_dataset(spec, out)
    print(f"wrote {sum(p.counts)} samples to {out}")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    ds = read_dataset(_require(args.inp, "--in"))
    if len(ds.masks) != len(ds) and cfg.preprocess.frame != "none":
        raise MammosegError("framing needs masks/ to locate the tumor")
    pp = cfg.preprocess
    images, masks = [], []
    for i, img in enumerate(ds.images):
        box = None
        if pp.frame != "none":
            tight = BoundingBox.from_mask(ds.masks[i])
            box = tight if pp.frame == "tight" else loose_frame_from_tight(tight, img.shape[1], img.shape[0])
        images.append(preprocess_roi(img, box, pp.size, pp.sigma, pp.bins))
        if ds.masks:
            m = as_mask(ds.masks[i])
            masks.append(resize_bilinear(m if box is None else crop(m, box), pp.size, pp.size))
    out = _out_dir(args)
    write_dataset(Dataset(ds.names, images, masks, ds.labels), out,
                  manifest={"preprocess": asdict(pp), "source": os.fspath(args.inp)})
    print(f"preprocessed {len(ds)} images into {out}")
    return 0


def cmd_train_seg(args, cfg: RunConfig) -> int:
    from .seggan import GeneratorSpec, new_gan_state, train_gan

    ds = read_dataset(_require(args.inp, "--in"))
    samples = _seg_samples(ds, cfg.seg.input_size)
    out = _out_dir(args)
    h = _gan_hash(cfg)
    if args.seg_ckpt:
        state = ck.load_gan_state(args.seg_ckpt, _gan_config(cfg), expected_hash=h)
    else:
        gspec = GeneratorSpec.for_input(cfg.seg.input_size, base_filters=cfg.seg.base_filters,
                                        dropout=cfg.seg.dropout)
        state = new_gan_state(_gan_config(cfg), gspec)

    def save(st, row):
        ck.save_gan_state(st, out / "seg.mgck", h)
        log.info("epoch %d saved", st.epoch)

    train_gan(samples, state, callback=save)
    if state.epoch == 0 or not (out / "seg.mgck").exists():
        ck.save_gan_state(state, out / "seg.mgck", h)
    if state.history:
        write_loss_csv(state.history, out / "loss.csv")
        (out / "loss.svg").write_text(loss_svg(state.history))
    last = state.history[-1] if state.history else {}
    print(f"trained {state.epoch} epochs; final gen_loss {last.get('gen_loss', float('nan')):.6f} "
          f"disc_loss {last.get('disc_loss', float('nan')):.6f}")
    return 0


def _load_generator(args, cfg):
    return ck.load_gan_state(_require(args.seg_ckpt, "--seg-ckpt"))


def cmd_infer_seg(args, cfg: RunConfig) -> int:
    from .seggan import binarize, predict_probability
    from .imaging import morph_cleanup

    state = _load_generator(args, cfg)
    size = 2 ** state.generator.spec.depth
    ds, _ = _inputs(_require(args.inp, "--in"))
    rng = np.random.default_rng([cfg.seed, 3])
    prob = predict_probability(state.generator, np.stack([_fit(im, size) for im in ds.images]), rng)
    out = _out_dir(args)
    (out / "masks").mkdir(exist_ok=True)
    for name, p in zip(ds.names, prob):
        write_pgm(morph_cleanup(binarize(p, cfg.seg.threshold)), out / "masks" / name)
    print(f"segmented {len(ds)} images into {out / 'masks'}")
    return 0


def cmd_eval_seg(args, cfg: RunConfig) -> int:
    from .seggan import evaluate_segmentation

    state = _load_generator(args, cfg)
    size = 2 ** state.generator.spec.depth
    ds = read_dataset(_require(args.inp, "--in"))
    samples = _seg_samples(ds, size)
    scores = evaluate_segmentation(state.generator, samples, np.random.default_rng([cfg.seed, 3]),
                                   cfg.seg.threshold)
    rows = [(n, d, j) for n, (d, j) in zip(ds.names, scores)]
    files = emit_report(EvalReport(rows=rows, loss_history=state.history), _out_dir(args))
    d = np.mean([r[1] for r in rows])
    j = np.mean([r[2] for r in rows])
    print(f"mean dice {d:.4f} mean iou {j:.4f} over {len(rows)} samples; report in {files['summary'].parent}")
    return 0


def cmd_train_shape(args, cfg: RunConfig) -> int:
    from .shapecnn import pooled_confusion, pooled_scores, stratified_kfold, train_classifier
    from .metrics import overall_accuracy

    ds = read_dataset(_require(args.inp, "--in"), require_labels=True)
    if len(ds.masks) != len(ds):
        raise MammosegError("dataset has no masks/ directory")
    spec, tcfg = _shape_specs(cfg)
    y = np.asarray(ds.labels, dtype=np.int64)
    plan = stratified_kfold(y, tcfg.folds, np.random.default_rng([cfg.seed, 0]))
    results = train_classifier(ds.masks, y, spec, tcfg, plan, workers=_threads())
    out = _out_dir(args)
    h = _shape_hash(cfg)
    for r in results:
        ck.save_classifier(r.model, out / f"shape_fold{r.fold}.mgck", h, extra={"fold": r.fold},
                           epoch=tcfg.epochs)
        write_csv(out / f"confusion_fold{r.fold}.csv", ["truth\\pred", *SHAPE_LABELS],
                  [[n, *map(int, row)] for n, row in zip(SHAPE_LABELS, r.confusion)])
    best = max(results, key=lambda r: (overall_accuracy(r.confusion), -r.fold))
    ck.save_classifier(best.model, out / "shape.mgck", h, extra={"fold": best.fold}, epoch=tcfg.epochs)
    scores, truth = pooled_scores(results)
    cm = pooled_confusion(results)
    emit_report(EvalReport(confusion=cm, roc=roc_auc(scores, truth)), out)
    print(f"{tcfg.folds}-fold macro accuracy {overall_accuracy(cm):.2f}%; "
          f"best fold {best.fold} saved as shape.mgck")
    return 0


def _masks_in(path: str):
    p = Path(path)
    if p.is_dir():
        ds = read_dataset(p) if (p / "images").is_dir() else None
        if ds is not None and ds.masks:
            return ds.names, ds.masks, ds.labels
        names = sorted(q.name for q in (p / "masks").glob("*.pgm"))
        from .imaging import read_mask
        return names, [read_mask(p / "masks" / n) for n in names], None
    from .imaging import read_mask
    return [p.name], [read_mask(p)], None


def cmd_infer_shape(args, cfg: RunConfig) -> int:
    from .shapecnn import predict_proba, prepare_masks

    model, _ = ck.load_classifier(_require(args.shape_ckpt, "--shape-ckpt"))
    names, masks, _ = _masks_in(_require(args.inp, "--in"))
    probs = predict_proba(model, prepare_masks(masks, model.spec.input_size))
    rows = [[n, SHAPE_LABELS[int(np.argmax(p))], *map(float, p)] for n, p in zip(names, probs)]
    for r in rows:
        print(f"{r[0]}\t{r[1]}")
    if args.out:
        write_csv(_out_dir(args) / "predictions.csv", ["filename", "shape_label", *SHAPE_LABELS], rows)
    return 0


def cmd_eval_shape(args, cfg: RunConfig) -> int:
    from .shapecnn import predict_proba, prepare_masks
    from .metrics import micro_accuracy, overall_accuracy

    model, _ = ck.load_classifier(_require(args.shape_ckpt, "--shape-ckpt"))
    ds = read_dataset(_require(args.inp, "--in"), require_labels=True)
    probs = predict_proba(model, prepare_masks(ds.masks, model.spec.input_size))
    cm = confusion_matrix(ds.labels, probs.argmax(axis=1))
    emit_report(EvalReport(confusion=cm, roc=roc_auc(probs, ds.labels)), _out_dir(args))
    print(f"macro accuracy {overall_accuracy(cm):.2f}% micro accuracy {micro_accuracy(cm):.2f}%")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .autodiff.gradcheck import run_layer_suites
    from .seggan import composite_gradcheck
    from .shapecnn import classifier_gradcheck

    ok = True
    for r in run_layer_suites():
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:22s} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:g})")
    for name, fn, tol in (("generator_objective", composite_gradcheck, 1e-3),
                          ("classifier_objective", classifier_gradcheck, 1e-4)):
        err = max(fn(s) for s in range(3))
        ok &= err <= tol
        print(f"{'PASS' if err <= tol else 'FAIL'} {name:22s} max rel err {err:.3e} (tol {tol:g})")
    return 0 if ok else 2


def cmd_pipeline(args, cfg: RunConfig) -> int:
    from .seggan import segment_roi
    from .shapecnn import classify_mask

    state = _load_generator(args, cfg)
    model, _ = ck.load_classifier(_require(args.shape_ckpt, "--shape-ckpt"))
    src = Path(_require(args.inp, "--in"))
    roi = read_pgm(src)
    size = 2 ** state.generator.spec.depth
    pp = cfg.preprocess
    x = preprocess_roi(roi, None, size, pp.sigma, pp.bins)
    mask = segment_roi(state.generator, x, np.random.default_rng([cfg.seed, 3]), cfg.seg.threshold)
    label, probs = classify_mask(model, mask)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    mask_path = out / f"{src.stem}_mask.pgm"
    write_pgm(mask, mask_path)
    print(f"shape: {label}")
    print("probabilities: " + " ".join(f"{n}={p:.4f}" for n, p in zip(SHAPE_LABELS, probs)))
    print(f"mask: {mask_path}")
    return 0


COMMANDS = {
    "phantom-gen": cmd_phantom_gen, "preprocess": cmd_preprocess, "train-seg": cmd_train_seg,
    "infer-seg": cmd_infer_seg, "train-shape": cmd_train_shape, "infer-shape": cmd_infer_shape,
    "eval-seg": cmd_eval_seg, "eval-shape": cmd_eval_shape, "gradcheck": cmd_gradcheck,
    "pipeline": cmd_pipeline,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name in ("out", "inp", "seg_ckpt", "shape_ckpt"):
            if not hasattr(args, name):
                setattr(args, name, None)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args.seed)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        _threads()
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError, ContractViolation, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MammosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FloatingPointError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
