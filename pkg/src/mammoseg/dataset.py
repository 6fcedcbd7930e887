"""On-disk dataset layout: ``images/*.pgm``, ``masks/*.pgm``, ``labels.csv``."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import FormatError, MammosegError
from .imaging import read_mask, read_pgm, write_pgm
from .phantom import SHAPE_LABELS, label_index

LABEL_HEADER = ["filename", "shape_label"]


@dataclass
class Dataset:
    names: List[str]
    images: List[np.ndarray]
    masks: List[np.ndarray]
    labels: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset([self.names[i] for i in idx], [self.images[i] for i in idx],
                       [self.masks[i] for i in idx],
                       None if self.labels is None else [self.labels[i] for i in idx])


def write_dataset(ds: Dataset, out_dir, manifest: Optional[dict] = None) -> None:
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for name, img, mask in zip(ds.names, ds.images, ds.masks):
            write_pgm(img, root / "images" / name)
            write_pgm(mask, root / "masks" / name)
        if ds.labels is not None:
            with open(root / "labels.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(LABEL_HEADER)
                for name, lab in zip(ds.names, ds.labels):
                    w.writerow([name, SHAPE_LABELS[lab]])
        if manifest is not None:
            with open(root / "manifest.json", "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
    except OSError as exc:
        raise MammosegError(f"cannot write dataset under {root}: {exc}") from exc


def read_labels(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:2]] != LABEL_HEADER[: len(rows[0][:2])]:
        raise FormatError(f"{path}: expected header {','.join(LABEL_HEADER)}")
    out = {}
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < 2 or not row[1].strip():
            out[row[0]] = None
            continue
        try:
            out[row[0]] = label_index(row[1].strip())
        except ValueError as exc:
            raise FormatError(f"{path}:{line}: {exc}") from None
    return out


def read_dataset(root, require_labels: bool = False) -> Dataset:
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise MammosegError(f"{root}: no images/ directory")
    names = sorted(p.name for p in img_dir.glob("*.pgm"))
    images = [read_pgm(img_dir / n) for n in names]
    mask_dir = root / "masks"
    masks = [read_mask(mask_dir / n) for n in names] if mask_dir.is_dir() else []
    labels = None
    if (root / "labels.csv").exists():
        table = read_labels(root / "labels.csv")
        if all(table.get(n) is not None for n in names):
            labels = [table[n] for n in names]
    if require_labels and labels is None:
        raise MammosegError(f"{root}: labels.csv missing or incomplete")
    return Dataset(names, images, masks, labels)
