"""A tour of the float64 autodiff engine everything else is built on.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from semvis import autodiff as ad
from semvis.autodiff import Tensor

# Build a tiny graph: convolution -> max+min pooling -> normalized projection.
rng = np.random.default_rng(0)
image = Tensor(rng.random((2, 8, 8)), requires_grad=True)
kernel = Tensor(rng.normal(scale=0.3, size=(3, 2, 3, 3)), requires_grad=True)
weight = Tensor(rng.normal(scale=0.5, size=(4, 3)), requires_grad=True)

features = ad.relu(ad.conv2d(image, kernel, stride=2, pad=1))
pooled = ad.spatial_max_min(features)          # per channel: max + min
embedding = ad.l2_normalize(ad.matmul(weight, pooled))
print("embedding:", np.round(embedding.data, 4), "| norm:", np.linalg.norm(embedding.data))

# Reverse-mode gradients of a scalar flow back to every tracked input.
score = ad.dot(embedding, Tensor(np.array([1.0, 0.0, 0.0, 0.0])))
score.backward()
print("grad wrt kernel has shape", kernel.grad.shape,
      "and mean magnitude", float(np.abs(kernel.grad).mean()))

# The engine's gradients agree with central finite differences to ~1e-8.
def rebuild():
    f = ad.relu(ad.conv2d(image, kernel, stride=2, pad=1))
    e = ad.l2_normalize(ad.matmul(weight, ad.spatial_max_min(f)))
    return ad.dot(e, Tensor(np.array([1.0, 0.0, 0.0, 0.0])))

err = ad.grad_check(rebuild, [image, kernel, weight])
print(f"worst relative error vs finite differences: {err:.2e}")

# max+min pooling keeps negative evidence: a strongly negative cell
# subtracts from the channel's score, unlike plain max pooling.
stack = Tensor(np.array([[[5.0, 0.0], [0.0, -4.0]]]))
print("max+min of [[5,0],[0,-4]]:", ad.spatial_max_min(stack).data[0], "(5 + -4)")
