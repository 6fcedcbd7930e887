"""Conditional-GAN tumour segmentation: encoder-decoder generator, patch
discriminator, adversarial + dice objectives and the training loop.
"""
from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Module,
                          init_normal, name_parameters)
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor
from .errors import BuildError, ConfigurationError, ContractViolation, NonFiniteError
from .imaging import as_mask, morph_cleanup
from .metrics import dice_iou

log = logging.getLogger(__name__)

PUBLISHED_GENERATOR_PARAMS = 13_607_043
EPS = 1e-7


# -- specs --------------------------------------------------------------------

@dataclass
class GeneratorSpec:
    in_channels: int = 1
    base_filters: int = 32
    depth: int = 8
    max_multiplier: int = 8
    dropout: float = 0.5
    dropout_layers: int = 3
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError(f"generator depth must be >= 2, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1:
            raise ConfigurationError("generator filters and channels must be positive")

    @classmethod
    def for_input(cls, size: int, **kw) -> "GeneratorSpec":
        """Depth that halves ``size`` down to a 1x1 bottleneck."""
        depth = int(round(math.log2(size)))
        if 2 ** depth != size:
            raise ConfigurationError(f"generator input size must be a power of two, got {size}")
        return cls(depth=depth, **kw)

    def encoder_channels(self) -> List[int]:
        cap = self.base_filters * self.max_multiplier
        return [min(self.base_filters * 2 ** i, cap) for i in range(self.depth)]

    def decoder_plan(self) -> List[Tuple[int, int]]:
        """(in_channels, out_channels) for Dn1..Dn_depth."""
        enc = self.encoder_channels()
        n = self.depth
        plan = []
        for k in range(1, n + 1):
            prev = enc[-1] if k == 1 else plan[-1][1]
            skip = enc[n - k] if 2 <= k <= n - 1 else 0
            out = enc[n - k - 1] if k < n else self.in_channels
            plan.append((prev + skip, out))
        return plan

    def expected_parameter_count(self) -> int:
        enc = self.encoder_channels()
        total, prev = 0, self.in_channels
        for i, c in enumerate(enc):
            total += prev * c * 16 + c
            if 0 < i < self.depth - 1:
                total += 2 * c
            prev = c
        for k, (cin, cout) in enumerate(self.decoder_plan(), start=1):
            total += cin * cout * 16 + cout
            if k < self.depth:
                total += 2 * cout
        return total


@dataclass
class DiscriminatorSpec:
    in_channels: int = 2
    base_filters: int = 32
    n_layers: int = 5
    n_strided: int = 3
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not 1 <= self.n_strided < self.n_layers:
            raise ConfigurationError("discriminator needs 1 <= n_strided < n_layers")

    def channels(self) -> List[int]:
        return [self.base_filters * 2 ** i for i in range(self.n_layers - 1)] + [1]

    def strides(self) -> List[int]:
        return [2 if i < self.n_strided else 1 for i in range(self.n_layers)]

    def output_size(self, size: int) -> int:
        for s in self.strides():
            size = F.conv_output_size(size, 4, s, 1)
        return size

    def receptive_field(self) -> int:
        """Input extent seen by one output value: r += (k - 1) * jump per layer."""
        r, jump = 1, 1
        for s in self.strides():
            r += 3 * jump
            jump *= s
        return r


@dataclass
class GanTrainConfig:
    lambda_dice: float = 150.0
    reconstruction_loss: str = "dice"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 150
    seed: int = 0
    eps: float = EPS
    threshold: float = 0.5

    def __post_init__(self):
        if self.lambda_dice < 0:
            raise ConfigurationError("lambda_dice must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.reconstruction_loss not in ("dice", "l1"):
            raise ConfigurationError(f"reconstruction_loss must be 'dice' or 'l1', got {self.reconstruction_loss!r}")


@dataclass
class SegSample:
    roi: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if np.shape(self.roi) != np.shape(self.mask):
            raise ContractViolation(f"roi {np.shape(self.roi)} and mask {np.shape(self.mask)} differ in extent")


# -- networks -------------------------------------------------------------------

class EncoderBlock(Module):
    def __init__(self, cin, cout, batchnorm, act, spec, dtype):
        self.conv = Conv2d(cin, cout, 4, 2, 1, dtype=dtype)
        self.bn = BatchNorm2d(cout, spec.bn_momentum, spec.bn_eps, dtype=dtype) if batchnorm else None
        self.act, self.slope = act, spec.leaky_slope

    def forward(self, x):
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        return F.leaky_relu(h, self.slope) if self.act == "leaky_relu" else F.relu(h)


class DecoderBlock(Module):
    def __init__(self, cin, cout, batchnorm, dropout, act, spec, dtype):
        self.deconv = ConvTranspose2d(cin, cout, 4, 2, 1, dtype=dtype)
        self.bn = BatchNorm2d(cout, spec.bn_momentum, spec.bn_eps, dtype=dtype) if batchnorm else None
        self.dropout, self.act = dropout, act

    def forward(self, x, rng=None, dropout_active=True):
        h = self.deconv(x)
        if self.bn is not None:
            h = self.bn(h)
        if self.dropout:
            h = F.dropout(h, self.dropout, rng, dropout_active)
        return F.tanh(h) if self.act == "tanh" else F.relu(h)


class Generator(Module):
    """Cn1..Cn_d encoder, Dn1..Dn_d decoder, skips Cn_{d+1-k} -> Dn_k for 2 <= k < d."""

    def __init__(self, spec: GeneratorSpec, dtype=np.float32):
        self.spec = spec
        enc = spec.encoder_channels()
        n = spec.depth
        blocks, prev = [], spec.in_channels
        for i, c in enumerate(enc):
            last = i == n - 1
            blocks.append(EncoderBlock(prev, c, batchnorm=0 < i < n - 1,
                                       act="relu" if last else "leaky_relu", spec=spec, dtype=dtype))
            prev = c
        self.enc = blocks
        self.dec = [
            DecoderBlock(cin, cout, batchnorm=k < n,
                         dropout=spec.dropout if k <= spec.dropout_layers else 0.0,
                         act="tanh" if k == n else "relu", spec=spec, dtype=dtype)
            for k, (cin, cout) in enumerate(spec.decoder_plan(), start=1)
        ]

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None,
                dropout_active: bool = True) -> Tensor:
        n = self.spec.depth
        size = x.shape[-1]
        if x.shape[-2] != size or size % (2 ** n):
            raise ConfigurationError(f"generator of depth {n} needs square input divisible by {2 ** n}, got {x.shape}")
        skips, h = [], x
        for blk in self.enc:
            h = blk(h)
            skips.append(h)
        for k, blk in enumerate(self.dec, start=1):
            if 2 <= k <= n - 1:
                h = F.concat([h, skips[n - k]], axis=1)
            h = blk(h, rng, dropout_active)
        return h


class Discriminator(Module):
    def __init__(self, spec: DiscriminatorSpec, dtype=np.float32):
        self.spec = spec
        chans, strides = spec.channels(), spec.strides()
        layers, prev = [], spec.in_channels
        for i, (c, s) in enumerate(zip(chans, strides)):
            layers.append(Conv2d(prev, c, 4, s, 1, dtype=dtype))
            prev = c
        self.conv = layers
        self.bn = [BatchNorm2d(c, spec.bn_momentum, spec.bn_eps, dtype=dtype) for c in chans[1:-1]]

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.conv)
        h = x
        for i, conv in enumerate(self.conv):
            h = conv(h)
            if 0 < i < n - 1:
                h = self.bn[i - 1](h)
            h = F.leaky_relu(h, self.spec.leaky_slope) if i < n - 1 else F.sigmoid(h)
        return h


def _count_table(net: Module) -> str:
    rows = [f"  {name:40s} {str(shape):22s} {size:>10d}" for name, shape, size in net.parameter_table()]
    return "\n".join(rows + [f"  {'total':40s} {'':22s} {net.num_parameters():>10d}"])


def build_generator(spec: GeneratorSpec = None, rng: Optional[np.random.Generator] = None,
                    dtype=np.float32) -> Generator:
    """Materialise and initialise G; Normal(0, 0.02) weights, gamma ~ Normal(1, 0.02)."""
    spec = spec or GeneratorSpec()
    net = Generator(spec, dtype)
    name_parameters(net, "gen")
    init_normal(net, rng if rng is not None else np.random.default_rng(0))
    count = net.num_parameters()
    if count != spec.expected_parameter_count():
        raise BuildError(f"generator has {count} parameters, plan says "
                         f"{spec.expected_parameter_count()}:\n{_count_table(net)}")
    if (spec.in_channels, spec.base_filters, spec.depth, spec.max_multiplier) == (1, 32, 8, 8):
        if abs(count - PUBLISHED_GENERATOR_PARAMS) > 1e-4 * PUBLISHED_GENERATOR_PARAMS:
            raise BuildError(f"generator count {count} is not within 0.01% of "
                             f"{PUBLISHED_GENERATOR_PARAMS}:\n{_count_table(net)}")
    return net


def build_discriminator(spec: DiscriminatorSpec = None, rng: Optional[np.random.Generator] = None,
                        dtype=np.float32) -> Discriminator:
    spec = spec or DiscriminatorSpec()
    net = Discriminator(spec, dtype)
    name_parameters(net, "disc")
    init_normal(net, rng if rng is not None else np.random.default_rng(0))
    chans = [spec.in_channels] + spec.channels()
    expected = sum(a * b * 16 + b for a, b in zip(chans[:-1], chans[1:])) + 2 * sum(spec.channels()[1:-1])
    if net.num_parameters() != expected:
        raise BuildError(f"discriminator has {net.num_parameters()} parameters, plan says {expected}:\n"
                         f"{_count_table(net)}")
    return net


# -- objectives -----------------------------------------------------------------

def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def dice_loss(y, g, eps: float = EPS) -> Tensor:
    """1 - (2|y*g| + eps) / (|y| + |g| + eps); exactly 0 for two empty masks."""
    y, g = _t(y), _t(g)
    if y.shape != g.shape:
        raise ContractViolation(f"dice_loss shapes differ: {y.shape} vs {g.shape}")
    inter = (y * g).sum()
    return 1.0 - (inter * 2.0 + eps) / (y.sum() + g.sum() + eps)


def batch_dice_loss(y, g, eps: float = EPS) -> Tensor:
    """Per-sample dice loss averaged over the leading batch axis."""
    y, g = _t(y), _t(g)
    if y.shape != g.shape:
        raise ContractViolation(f"dice_loss shapes differ: {y.shape} vs {g.shape}")
    axes = tuple(range(1, y.ndim))
    inter = (y * g).sum(axis=axes)
    per = 1.0 - (inter * 2.0 + eps) / (y.sum(axis=axes) + g.sum(axis=axes) + eps)
    return per.mean()


def adversarial_term(d_out, eps: float = EPS) -> Tensor:
    return -((_t(d_out) + eps).log().mean())


def reconstruction_term(y, g, kind: str = "dice", eps: float = EPS) -> Tensor:
    if kind == "dice":
        return batch_dice_loss(y, g, eps)
    if kind == "l1":
        return (_t(y) - _t(g)).abs().mean()
    raise ConfigurationError(f"unknown reconstruction loss {kind!r}")


def generator_loss(d_out, y, g, cfg: GanTrainConfig = None) -> Tensor:
    """mean(-log(D(x, G(x,z)) + eps)) + lambda * reconstruction(y, G(x,z))."""
    cfg = cfg or GanTrainConfig()
    adv = adversarial_term(d_out, cfg.eps)
    if cfg.lambda_dice == 0:
        return adv
    return adv + reconstruction_term(y, g, cfg.reconstruction_loss, cfg.eps) * cfg.lambda_dice


def discriminator_loss(d_real, d_fake, eps: float = EPS) -> Tensor:
    """mean(-log(D(x, y) + eps)) + mean(-log(1 - D(x, G(x,z)) + eps))."""
    real = -((_t(d_real) + eps).log().mean())
    fake = -(((1.0 - _t(d_fake)) + eps).log().mean())
    return real + fake


# -- training ---------------------------------------------------------------------

@contextlib.contextmanager
def frozen(net: Module) -> Iterator[None]:
    """Skip weight-gradient work for ``net`` while gradients flow through it.

    The flag is read during backward, so the backward pass must run inside
    the block.
    """
    params = net.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def to_unit(t: Tensor) -> Tensor:
    """Map tanh output from [-1, 1] to [0, 1]."""
    return (t + 1.0) * 0.5


def stack_batch(samples: Sequence[SegSample], dtype=np.float32) -> Tuple[Tensor, Tensor]:
    x = np.stack([np.asarray(s.roi, dtype=dtype) for s in samples])[:, None]
    y = np.stack([np.asarray(s.mask, dtype=dtype) for s in samples])[:, None]
    return Tensor(x), Tensor(y)


def _finite(name: str, value: Tensor) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite {name}: {v}")
    return v


@dataclass
class GanState:
    """Everything a training run mutates; checkpoints persist exactly this."""
    generator: Generator
    discriminator: Discriminator
    opt_g: Adam
    opt_d: Adam
    cfg: GanTrainConfig
    rng: np.random.Generator
    epoch: int = 0
    history: List[dict] = field(default_factory=list)


def new_gan_state(cfg: GanTrainConfig, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec = None,
                  dtype=np.float32) -> GanState:
    init_rng = np.random.default_rng([cfg.seed, 1])
    g = build_generator(gen_spec, init_rng, dtype)
    d = build_discriminator(disc_spec or DiscriminatorSpec(base_filters=gen_spec.base_filters), init_rng, dtype)
    hyper = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return GanState(g, d, Adam(g.parameters(), **hyper), Adam(d.parameters(), **hyper),
                    cfg, np.random.default_rng([cfg.seed, 2]))


def gan_train_step(x: Tensor, y: Tensor, state: GanState) -> Dict[str, float]:
    """One D update on real/detached-fake pairs, then one G update against the fresh D."""
    G, D, cfg = state.generator, state.discriminator, state.cfg
    G.train()
    D.train()
    g = to_unit(G(x, state.rng, dropout_active=True))

    D.zero_grad()
    d_real = D(F.concat([x, y], axis=1))
    d_fake = D(F.concat([x, g.detach()], axis=1))
    loss_d = discriminator_loss(d_real, d_fake, cfg.eps)
    disc = _finite("discriminator loss", loss_d)
    loss_d.backward()
    state.opt_d.step()

    G.zero_grad()
    with frozen(D):
        d_out = D(F.concat([x, g], axis=1))
        adv = adversarial_term(d_out, cfg.eps)
        rec = reconstruction_term(y, g, cfg.reconstruction_loss, cfg.eps)
        loss_g = adv + rec * cfg.lambda_dice if cfg.lambda_dice else adv
        adv_v = _finite("adversarial term", adv)
        rec_v = _finite(f"{cfg.reconstruction_loss} term", rec)
        gen = _finite("generator loss", loss_g)
        loss_g.backward()
    state.opt_g.step()
    dice_v = rec_v if cfg.reconstruction_loss == "dice" else float(batch_dice_loss(y.data, g.data, cfg.eps).data)
    return {"gen_loss": gen, "disc_loss": disc, "dice_term": dice_v, "adv_term": adv_v, "rec_term": rec_v}


def batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is dropped (batchnorm needs >= 2)."""
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def train_epoch(samples: Sequence[SegSample], state: GanState) -> dict:
    sums: Dict[str, float] = {}
    steps = 0
    for idx in batches(len(samples), state.cfg.batch_size, state.rng):
        x, y = stack_batch([samples[i] for i in idx], state.generator.enc[0].conv.weight.dtype)
        for k, v in gan_train_step(x, y, state).items():
            sums[k] = sums.get(k, 0.0) + v
        steps += 1
    state.epoch += 1
    row = {"epoch": state.epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
    state.history.append(row)
    log.info("epoch %d gen %.4f disc %.4f dice %.4f", state.epoch, row.get("gen_loss", float("nan")),
             row.get("disc_loss", float("nan")), row.get("dice_term", float("nan")))
    return row


def train_gan(samples: Sequence[SegSample], state: GanState, epochs: Optional[int] = None,
              callback=None) -> GanState:
    """Run epochs until ``state.epoch`` reaches ``epochs`` (default cfg.epochs)."""
    target = state.cfg.epochs if epochs is None else epochs
    while state.epoch < target:
        row = train_epoch(samples, state)
        if callback is not None:
            callback(state, row)
    return state


# -- inference --------------------------------------------------------------------

def predict_probability(G: Generator, rois: np.ndarray, rng: np.random.Generator,
                        batch_size: int = 16) -> np.ndarray:
    """Rescaled generator output in [0, 1] for a stack of ROIs (N, H, W).

    Batchnorm uses running statistics; dropout stays active (test-time z).
    """
    G.eval()
    dtype = G.enc[0].conv.weight.dtype
    rois = np.asarray(rois, dtype=dtype)
    out = []
    for i in range(0, len(rois), batch_size):
        x = Tensor(rois[i : i + batch_size, None])
        out.append(to_unit(G(x, rng, dropout_active=True)).data[:, 0])
    G.train()
    return np.concatenate(out).astype(np.float64)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def segment_roi(G: Generator, roi, rng: np.random.Generator, threshold: float = 0.5) -> np.ndarray:
    """Threshold the rescaled generator output and clean it up morphologically."""
    prob = predict_probability(G, np.asarray(roi)[None], rng)[0]
    return morph_cleanup(binarize(prob, threshold))


def evaluate_segmentation(G: Generator, samples: Sequence[SegSample], rng: np.random.Generator,
                          threshold: float = 0.5) -> List[Tuple[float, float]]:
    """(dice, iou) per sample after thresholding and morph_cleanup."""
    prob = predict_probability(G, np.stack([s.roi for s in samples]), rng)
    return [dice_iou(as_mask(s.mask), morph_cleanup(binarize(p, threshold)))
            for s, p in zip(samples, prob)]


# -- verification -------------------------------------------------------------------

def composite_gradcheck(seed: int = 0, max_entries: int = 12) -> float:
    """Central-difference check of the full generator objective on a reduced
    float64 network (base_filters=2, 16x16 input); returns the worst relative error."""
    from .autodiff.gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    gspec = GeneratorSpec(base_filters=2, depth=4)
    dspec = DiscriminatorSpec(base_filters=2, n_strided=2)
    G = build_generator(gspec, rng, np.float64)
    D = build_discriminator(dspec, rng, np.float64)
    # wider init so activations are not all near zero
    for p in G.parameters() + D.parameters():
        if p.ndim == 4:
            p.data = rng.normal(0, 0.3, p.shape)
    x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
    y = Tensor((rng.uniform(0, 1, (2, 1, 16, 16)) > 0.5).astype(np.float64))
    cfg = GanTrainConfig()
    drop_seed = int(rng.integers(2**31))

    def loss():
        g = to_unit(G(x, np.random.default_rng(drop_seed), True))
        return generator_loss(D(F.concat([x, g], axis=1)), y, g, cfg)

    return check_gradients(loss, G.parameters(), max_entries=max_entries, rng=rng)
