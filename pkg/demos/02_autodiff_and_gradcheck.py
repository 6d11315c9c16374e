"""Differentiate a small 3D conv block by hand-built tape and check it numerically.

Run:  python demos/02_autodiff_and_gradcheck.py
"""

import numpy as np

from grjointnet import autodiff as ad
from grjointnet.autodiff import Tape, Tensor
from grjointnet.gradcheck import check_gradients, format_table, run_all
from grjointnet.core import make_rng

rng = make_rng(3)
x = rng.normal(size=(1, 2, 6, 6, 6))
k = rng.normal(size=(3, 2, 3, 3, 3)) * 0.3


def block(tensors):
    inp, kern = tensors
    y = ad.conv3d(inp, kern, stride=1, padding=1)
    y = ad.max_pool3d(ad.leaky_relu(y), 2)
    return ad.reduce_mean(ad.square(y))


kt = Tensor(k, requires_grad=True)
with Tape() as tape:
    loss = block([Tensor(x), kt])
tape.backward(loss)
print(f"loss {float(loss.data):.5f}; {len(tape)} recorded ops; |dL/dk| = "
      f"{np.linalg.norm(kt.grad):.4f}")

# Central differences on a random subset of entries.
err = check_gradients(block, [x, k], rng, max_probes=12)
print(f"relative error vs finite differences: {err:.2e}")

# The packaged suites cover every differentiable op plus the whole network.
print(format_table(run_all(seed=0)))
