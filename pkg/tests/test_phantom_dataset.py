import hashlib
from pathlib import Path

import numpy as np
import pytest

from mammoseg.dataset import Dataset, read_dataset, read_labels, write_dataset
from mammoseg.errors import ConfigurationError, ContractViolation, FormatError, MammosegError
from mammoseg.phantom import (SHAPE_LABELS, PhantomSpec, circularity, crofton_perimeter,
                              generate, generate_dataset, label_index, make_sample,
                              sample_rng, sample_shape_mask)


def test_labels_round_trip():
    assert [label_index(n) for n in SHAPE_LABELS] == [0, 1, 2, 3]
    assert label_index(2) == 2
    with pytest.raises(ContractViolation):
        label_index("spiculated")
    with pytest.raises(ContractViolation):
        label_index(4)


def test_same_seed_same_mask_and_image():
    for label in range(4):
        a = sample_shape_mask(label, 64, sample_rng(3, label))
        b = sample_shape_mask(label, 64, sample_rng(3, label))
        np.testing.assert_array_equal(a, b)
        assert a.any() and set(np.unique(a)) <= {0, 1}
    spec = PhantomSpec(size=64, counts=(1, 1, 1, 1), seed=9)
    np.testing.assert_array_equal(make_sample(spec, 2, "oval").roi, make_sample(spec, 2, "oval").roi)


def test_sample_is_independent_of_generation_order():
    spec = PhantomSpec(size=64, counts=(2, 2, 2, 2), seed=4)
    full = generate(spec)
    alone = make_sample(spec, 5, full[5].label)
    np.testing.assert_array_equal(full[5].mask, alone.mask)
    np.testing.assert_array_equal(full[5].roi, alone.roi)


def test_round_robin_labels():
    assert PhantomSpec(counts=(2, 1, 0, 1)).labels() == [0, 1, 3, 0]


def test_crofton_perimeter_of_disk():
    x, y = np.meshgrid(np.arange(200), np.arange(200))
    disk = ((x - 100) ** 2 + (y - 100) ** 2 <= 60 ** 2).astype(np.uint8)
    assert crofton_perimeter(disk) == pytest.approx(2 * np.pi * 60, rel=0.02)
    assert circularity(disk) == pytest.approx(1.0, abs=0.03)
    assert circularity(np.zeros((4, 4))) == 0.0


def test_shape_classes_separate_by_circularity():
    circ = {c: np.array([circularity(sample_shape_mask(c, 128, sample_rng(11, 1000 * c + i)))
                         for i in range(100)]) for c in range(4)}
    q = {c: np.percentile(v, [25, 75]) for c, v in circ.items()}
    assert q[3][0] > q[0][1]  # round vs irregular interquartile ranges do not overlap
    assert np.median(circ[3]) >= 0.9 and np.median(circ[0]) <= 0.6
    assert np.mean(circ[3]) > np.mean(circ[2]) > np.mean(circ[1]) > np.mean(circ[0])


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        PhantomSpec(size=32)
    with pytest.raises(ConfigurationError):
        PhantomSpec(contrast=0.1, noise=0.2)
    with pytest.raises(ConfigurationError):
        PhantomSpec(counts=(1, 2, 3))


def _digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_dataset_layout_and_determinism(tmp_path):
    spec = PhantomSpec(size=64, counts=(3, 2, 2, 1), seed=1)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    ds = read_dataset(tmp_path / "a", require_labels=True)
    assert len(ds) == 8 and len(ds.masks) == 8
    assert sorted(np.bincount(ds.labels, minlength=4)) == [1, 2, 2, 3]
    assert (tmp_path / "a" / "manifest.json").exists()
    assert len(read_labels(tmp_path / "a" / "labels.csv")) == 8


def test_dataset_errors(tmp_path):
    with pytest.raises(MammosegError):
        read_dataset(tmp_path)
    (tmp_path / "labels.csv").write_text("name,kind\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "labels.csv")
    (tmp_path / "labels.csv").write_text("filename,shape_label\na.pgm,spiky\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "labels.csv")


def test_dataset_subset_and_unlabeled(tmp_path):
    img = np.full((4, 4), 0.5)
    m = np.zeros((4, 4), np.uint8)
    ds = Dataset(["x.pgm", "y.pgm"], [img, img], [m, m], [0, 3])
    assert ds.subset([1]).labels == [3]
    write_dataset(Dataset(["x.pgm"], [img], [m]), tmp_path)
    assert read_dataset(tmp_path).labels is None
    with pytest.raises(MammosegError):
        read_dataset(tmp_path, require_labels=True)
