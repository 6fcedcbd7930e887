"""A tiny conv net on the autodiff core, checked against finite differences.

Every layer records its own backward rule on the tape.  Here we build a
conv -> batch norm -> leaky ReLU -> dense stack in float64, push a batch
through it and compare the tape gradients with central differences.
"""
import numpy as np

from mammoseg.autodiff import Tensor
from mammoseg.autodiff import functional as F
from mammoseg.autodiff.gradcheck import check_gradients, run_layer_suites
from mammoseg.autodiff.nn import BatchNorm2d, Conv2d, Dense

rng = np.random.default_rng(0)
conv = Conv2d(1, 4, 3, stride=2, padding=1, dtype=np.float64)
bn = BatchNorm2d(4, dtype=np.float64)
head = Dense(4 * 4 * 4, 3, dtype=np.float64)
for p in conv.parameters() + head.parameters():
    p.data[...] = rng.normal(0, 0.3, p.data.shape)

x = Tensor(rng.random((5, 1, 8, 8)), requires_grad=True)
onehot = np.eye(3)[rng.integers(0, 3, 5)]


def loss():
    h = F.leaky_relu(bn(conv(x)), 0.2)
    p = F.softmax_rows(head(F.flatten(h)))
    return -((p * onehot).sum(axis=1) + 1e-7).log().mean()


err = check_gradients(loss, [x] + conv.parameters() + bn.parameters() + head.parameters())
print(f"tape vs central differences, worst relative error: {err:.2e}")

# the same machinery, run over every layer kind the networks use
for r in run_layer_suites(seeds=range(3)):
    print(f"  {r.name:<18} {r.max_rel_error:.1e}")
