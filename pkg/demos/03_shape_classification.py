"""Classify mass shape from a binary mask.

Irregular stars and lobulated blobs both have bumpy outlines, while oval
and round masses are smooth.  In the full study (200 masks per class,
5 folds, 50 epochs, in the acceptance suite) most mistakes fall between
irregular and lobular.  This is a short 3-fold run on 60 masks per class,
so expect a clearly weaker model.
"""
import os

from mammoseg.experiments import shape_study
from mammoseg.phantom import SHAPE_LABELS

study = shape_study(per_class=60, folds=3, epochs=30, workers=min(os.cpu_count() or 1, 3))
print("confusion (rows = truth):", " ".join(SHAPE_LABELS))
print(study.confusion)
a, b, n = study.dominant_confusion()
print(f"macro accuracy {study.macro_accuracy:.3f}, micro-averaged AUC {study.auc:.3f}")
print(f"most confused pair: {a} <-> {b} ({n} masks), {study.seconds:.0f} s")
