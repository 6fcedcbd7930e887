"""MGCK checkpoint files.

Layout (all integers little-endian)::

    b"MGCK"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x [ u32 name_len  name (UTF-8)  u32 rank  rank x u64 extent
                  payload: prod(extents) x float32 ]

Metadata carries the config hash, epoch, RNG bit-generator state and the
optimizer step counters, so a loaded state resumes training exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import FormatError, MammosegError

MAGIC = b"MGCK"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def config_hash(doc: dict) -> str:
    """sha256 of the canonical JSON form of ``doc``."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(tensors: Dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    mb = _meta_bytes(meta)
    parts += [_U32.pack(len(mb)), mb, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if a.dtype.kind != "f":
            raise MammosegError(f"tensor {name!r} has non-real dtype {a.dtype}")
        nb = name.encode()
        parts += [_U32.pack(len(nb)), nb, _U32.pack(a.ndim)]
        parts += [_U64.pack(d) for d in a.shape]
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode_checkpoint(data: bytes) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not an MGCK checkpoint (bad magic)", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        meta = json.loads(r.take(r.u32("metadata length"), "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", 12) from None
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    count = r.u32("tensor count")
    for i in range(count):
        start = r.pos
        try:
            name = r.take(r.u32(f"name length of tensor #{i}"), f"name of tensor #{i}").decode()
        except UnicodeDecodeError:
            raise FormatError(f"tensor #{i} name is not UTF-8", start) from None
        rank = r.u32(f"rank of tensor {name!r}")
        if rank > 8:
            raise FormatError(f"tensor {name!r} has implausible rank {rank}", start)
        shape = tuple(r.u64(f"extents of tensor {name!r}") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"payload of tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor", r.pos)
    return tensors, meta


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(tensors, meta))
    except OSError as exc:
        raise MammosegError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    try:
        data = Path(path).read_bytes()
    except (FileNotFoundError, IsADirectoryError):
        raise  # a bad path is an input error, not a runtime failure
    except OSError as exc:
        raise MammosegError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode_checkpoint(data)
    except FormatError as exc:
        raise exc.prefixed(str(path)) from None


# -- training-state bridges ----------------------------------------------------

def _prefixed(prefix: str, d: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in d.items()}


def _split(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    p = prefix + "/"
    return OrderedDict((k[len(p):], v) for k, v in tensors.items() if k.startswith(p))


def check_hash(meta: dict, expected: Optional[str], override: bool = False) -> None:
    if expected is None or override:
        return
    if meta.get("config_hash") != expected:
        raise MammosegError(f"checkpoint config hash {meta.get('config_hash')} does not match "
                            f"the current config {expected} (pass an override to force)")


def gan_tensors(state) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    out.update(_prefixed("generator", state.generator.state_dict()))
    out.update(_prefixed("discriminator", state.discriminator.state_dict()))
    out.update(_prefixed("opt_g", state.opt_g.state_dict()))
    out.update(_prefixed("opt_d", state.opt_d.state_dict()))
    return out


def save_gan_state(state, path, cfg_hash: str = "", extra: Optional[dict] = None) -> None:
    from dataclasses import asdict

    meta = {"kind": "seg-gan", "config_hash": cfg_hash, "epoch": state.epoch,
            "rng_state": state.rng.bit_generator.state,
            "opt_t": {"g": state.opt_g.t, "d": state.opt_d.t},
            "generator_spec": asdict(state.generator.spec),
            "discriminator_spec": asdict(state.discriminator.spec),
            "train_config": asdict(state.cfg), "history": state.history}
    meta.update(extra or {})
    save_checkpoint(path, gan_tensors(state), meta)


def restore_gan_state(state, tensors, meta) -> None:
    """Load weights, buffers, optimizer moments, RNG and counters into ``state``."""
    if meta.get("kind") != "seg-gan":
        raise MammosegError(f"checkpoint holds {meta.get('kind')!r}, not a segmentation GAN")
    state.generator.load_state_dict(_split(tensors, "generator"))
    state.discriminator.load_state_dict(_split(tensors, "discriminator"))
    state.opt_g.load_state_dict(_split(tensors, "opt_g"), meta["opt_t"]["g"])
    state.opt_d.load_state_dict(_split(tensors, "opt_d"), meta["opt_t"]["d"])
    state.rng.bit_generator.state = meta["rng_state"]
    state.epoch = int(meta["epoch"])
    state.history = list(meta.get("history", []))


def load_gan_state(path, cfg=None, expected_hash: Optional[str] = None, override: bool = False):
    """Rebuild a GanState from a checkpoint; ``cfg`` defaults to the stored one."""
    from .seggan import DiscriminatorSpec, GanTrainConfig, GeneratorSpec, new_gan_state

    tensors, meta = load_checkpoint(path)
    check_hash(meta, expected_hash, override)
    if meta.get("kind") != "seg-gan":
        raise MammosegError(f"{path}: checkpoint holds {meta.get('kind')!r}, not a segmentation GAN")
    cfg = cfg or GanTrainConfig(**meta["train_config"])
    state = new_gan_state(cfg, GeneratorSpec(**meta["generator_spec"]),
                          DiscriminatorSpec(**meta["discriminator_spec"]))
    restore_gan_state(state, tensors, meta)
    return state


def save_classifier(model, path, cfg_hash: str = "", extra: Optional[dict] = None,
                    opt=None, rng=None, epoch: int = 0) -> None:
    from dataclasses import asdict

    tensors = OrderedDict(_prefixed("classifier", model.state_dict()))
    meta = {"kind": "shape-cnn", "config_hash": cfg_hash, "epoch": epoch,
            "classifier_spec": asdict(model.spec)}
    if opt is not None:
        tensors.update(_prefixed("opt", opt.state_dict()))
        meta["opt_t"] = opt.t
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    meta.update(extra or {})
    save_checkpoint(path, tensors, meta)


def load_classifier(path, expected_hash: Optional[str] = None, override: bool = False):
    from .shapecnn import ClassifierSpec, build_classifier

    tensors, meta = load_checkpoint(path)
    check_hash(meta, expected_hash, override)
    if meta.get("kind") != "shape-cnn":
        raise MammosegError(f"{path}: checkpoint holds {meta.get('kind')!r}, not a shape classifier")
    model = build_classifier(ClassifierSpec(**meta["classifier_spec"]))
    model.load_state_dict(_split(tensors, "classifier"))
    return model, meta


def save_classifier_state(state, path, cfg_hash: str = "") -> None:
    """Classifier weights plus RMSProp moments, RNG, epoch and class weights."""
    from dataclasses import asdict

    save_classifier(state.model, path, cfg_hash, opt=state.opt, rng=state.rng, epoch=state.epoch,
                    extra={"train_config": asdict(state.cfg), "class_weights": state.weights.tolist(),
                           "history": state.history})


def load_classifier_state(path, expected_hash: Optional[str] = None, override: bool = False):
    from .autodiff.optim import RMSProp
    from .shapecnn import ClassifierState, ClassifierTrainConfig

    model, meta = load_classifier(path, expected_hash, override)
    if "opt_t" not in meta or "rng_state" not in meta:
        raise MammosegError(f"{path}: checkpoint has no optimizer/RNG state to resume from")
    tensors, _ = load_checkpoint(path)
    cfg = ClassifierTrainConfig(**meta["train_config"])
    opt = RMSProp(model.parameters(), lr=cfg.lr, alpha=cfg.alpha, momentum=cfg.momentum, eps=cfg.rms_eps)
    opt.load_state_dict(_split(tensors, "opt"), meta["opt_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return ClassifierState(model, opt, cfg, np.asarray(meta["class_weights"]), rng,
                           int(meta["epoch"]), list(meta.get("history", [])))
