import struct

import numpy as np
import pytest

from mammoseg import checkpoint as ck
from mammoseg.errors import FormatError, MammosegError
from mammoseg.experiments import classifier_checkpoint_bytes, gan_checkpoint_bytes
from mammoseg.seggan import DiscriminatorSpec, GanTrainConfig, GeneratorSpec, new_gan_state

from test_seggan import tiny_samples


def _tensors():
    rng = np.random.default_rng(0)
    return {"a/w": rng.normal(size=(3, 2, 4, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
            "scalar": np.array(2.5, np.float32)}


def test_encode_decode_roundtrip():
    meta = {"epoch": 3, "config_hash": "x", "nested": {"b": 1, "a": [1, 2]}}
    data = ck.encode_checkpoint(_tensors(), meta)
    tensors, back = ck.decode_checkpoint(data)
    assert back == meta
    assert list(tensors) == list(_tensors())
    for k, v in _tensors().items():
        assert tensors[k].dtype == np.float32
        np.testing.assert_array_equal(tensors[k], v)
    assert ck.encode_checkpoint(tensors, back) == data


def test_layout_header():
    data = ck.encode_checkpoint({"w": np.ones(2, np.float32)}, {"k": 1})
    assert data[:4] == b"MGCK"
    version, meta_len = struct.unpack_from("<II", data, 4)
    assert version == ck.VERSION and data[12 : 12 + meta_len] == b'{"k":1}'


@pytest.mark.parametrize("mutate,fragment", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 99) + d[8:], "version"),
    (lambda d: d[:-3], "payload of tensor 'scalar'"),
    (lambda d: d + b"\x00", "trailing"),
    (lambda d: d[:10], "truncated"),
])
def test_corruption_is_rejected(mutate, fragment):
    data = ck.encode_checkpoint(_tensors(), {"epoch": 1})
    with pytest.raises(FormatError, match=fragment) as info:
        ck.decode_checkpoint(mutate(data))
    assert info.value.offset is not None


def test_load_names_the_file(tmp_path):
    p = tmp_path / "bad.mgck"
    p.write_bytes(b"nope")
    with pytest.raises(FormatError, match="bad.mgck"):
        ck.load_checkpoint(p)
    with pytest.raises(FileNotFoundError):
        ck.load_checkpoint(tmp_path / "missing.mgck")


def test_config_hash_and_check():
    h = ck.config_hash({"b": 1, "a": 2})
    assert h == ck.config_hash({"a": 2, "b": 1}) and len(h) == 64
    ck.check_hash({"config_hash": h}, h)
    with pytest.raises(MammosegError, match="does not match"):
        ck.check_hash({"config_hash": "other"}, h)
    ck.check_hash({"config_hash": "other"}, h, override=True)


def test_gan_state_save_load_save_is_byte_identical(tmp_path):
    cfg = GanTrainConfig(batch_size=4, seed=3)
    state = new_gan_state(cfg, GeneratorSpec.for_input(32, base_filters=2), DiscriminatorSpec(base_filters=2))
    ck.save_gan_state(state, tmp_path / "a.mgck", "h")
    again = ck.load_gan_state(tmp_path / "a.mgck", expected_hash="h")
    ck.save_gan_state(again, tmp_path / "b.mgck", "h")
    assert (tmp_path / "a.mgck").read_bytes() == (tmp_path / "b.mgck").read_bytes()
    with pytest.raises(MammosegError):
        ck.load_gan_state(tmp_path / "a.mgck", expected_hash="other")
    with pytest.raises(MammosegError, match="not a shape classifier"):
        ck.load_classifier(tmp_path / "a.mgck")


def test_gan_resume_equals_uninterrupted(tmp_path):
    samples = tiny_samples(8, size=32)
    straight = gan_checkpoint_bytes(samples, 5, 2, tmp_path / "s.mgck", base_filters=2)
    again = gan_checkpoint_bytes(samples, 5, 2, tmp_path / "t.mgck", base_filters=2)
    resumed = gan_checkpoint_bytes(samples, 5, 2, tmp_path / "r.mgck", base_filters=2, resume_at=1)
    assert straight == again == resumed
    other = gan_checkpoint_bytes(samples, 6, 2, tmp_path / "o.mgck", base_filters=2)
    assert other != straight


def test_classifier_resume_equals_uninterrupted(tmp_path):
    rng = np.random.default_rng(0)
    masks = [(rng.random((64, 64)) > 0.5).astype(np.uint8) for _ in range(12)]
    labels = np.arange(12) % 4
    straight = classifier_checkpoint_bytes(masks, labels, 1, 2, tmp_path / "s.mgck")
    resumed = classifier_checkpoint_bytes(masks, labels, 1, 2, tmp_path / "r.mgck", resume_at=1)
    assert straight == resumed
    state = ck.load_classifier_state(tmp_path / "s.mgck", "determinism")
    assert state.epoch == 2 and len(state.history) == 2
