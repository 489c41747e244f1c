# Reverse-mode gradients on a tape, checked against central differences.
import numpy as np

from bccseg import tensor as T
from bccseg.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# float64 leaves so the finite differences are meaningful
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
target = rng.integers(0, 2, (1, 6, 6))

def loss_fn():
    y = T.conv2d(x, w, padding=2, dilation=2)
    y = T.relu(y)
    logits = T.conv2d(y, Tensor(np.ones((2, 3, 1, 1)) * [[[[1.0]]], [[[-1.0]]]]))
    return T.cross_entropy_loss(logits, target)

with Tape() as tape:
    loss = loss_fn()
tape.backward(loss)
print("loss", loss.item())
print("ops recorded on the tape:", [r.name for r in tape.records])

# nudge one weight in each direction and compare the slope with the tape
eps = 1e-6
for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)]:
    orig = w.data[idx]
    w.data[idx] = orig + eps
    up = loss_fn().item()
    w.data[idx] = orig - eps
    down = loss_fn().item()
    w.data[idx] = orig
    numeric = (up - down) / (2 * eps)
    print(f"dL/dw{idx}: tape {w.grad[idx]: .8f}  numeric {numeric: .8f}")
