"""
Reverse-mode gradients of a small CNN
=====================================

The network, its loss and every gradient are plain numpy. This script builds a
tiny network, evaluates the joint loss (parent BCE + lambda * sub-category BCE)
on one random image, and compares a few analytic gradient entries with
central finite differences.
"""

import numpy as np

from subcam import tensor as T
from subcam.model import Architecture, forward_features, init_network, parent_logits, sub_logits
from subcam.train import joint_loss

rng = np.random.default_rng(0)

# Two conv blocks of 4 and 6 channels, one pooling step, a 16-d feature
# layer; 3 parent categories with 2 sub-categories each.
arch = Architecture(num_classes=3, num_subclusters=2, channels=(4, 6), pool=(True, False), feature_dim=16)
net = init_network(arch, seed=0)
print("parameters:", net.parameter_count())

x = rng.random((1, 8, 8, 3))
y_parent = np.array([[1.0, 0.0, 1.0]])
y_sub = np.array([[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]])  # one sub-category per present parent


def loss_value():
    _, pooled = forward_features(net, x)
    return joint_loss(parent_logits(net, pooled), y_parent, sub_logits(net, pooled), y_sub, lam=5.0)


# %% analytic gradients: one backward pass fills .grad on every parameter
loss = loss_value()
print("loss:", float(loss.data))
T.backward(loss)

# %% finite differences on a handful of entries
h = 1e-5
with T.no_grad():
    for name in ("conv0.w", "feat.w", "head_p.w", "head_s.w"):
        p = net.params[name]
        j = int(rng.integers(p.size))
        flat = p.data.reshape(-1)
        old = flat[j]
        flat[j] = old + h
        up = float(loss_value().data)
        flat[j] = old - h
        down = float(loss_value().data)
        flat[j] = old
        numeric = (up - down) / (2 * h)
        analytic = p.grad.reshape(-1)[j]
        print(f"{name:10s}[{j:3d}]  analytic {analytic:+.8f}  numeric {numeric:+.8f}")
