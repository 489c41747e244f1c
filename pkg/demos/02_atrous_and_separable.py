# Why dilation widens the view for free, and what depthwise separation saves.
import numpy as np

from bccseg import tensor as T
from bccseg.opcount import regular_conv_macs, separable_conv_macs
from bccseg.tensor import Tensor

rng = np.random.default_rng(1)
x = Tensor(rng.standard_normal((1, 4, 27, 36)))
w = Tensor(rng.standard_normal((4, 4, 3, 3)))

# a rate-r 3x3 kernel is a (2r+1)x(2r+1) kernel that is mostly zeros
for rate in (6, 12, 18):
    big = np.zeros((4, 4, 2 * rate + 1, 2 * rate + 1))
    big[:, :, ::rate, ::rate] = w.data
    with T.count_macs() as tally:
        y = T.conv2d(x, w, padding=rate, dilation=rate)
    y_big = T.conv2d(x, Tensor(big), padding=rate)
    print(f"rate {rate:2d}: field of view {2 * rate + 1}x{2 * rate + 1}, "
          f"MACs {tally[0]:,}, identical to inflated kernel: {np.array_equal(y.data, y_big.data)}")

# depthwise 3x3 then pointwise 1x1, against one full 3x3 convolution
c_in, c_out, k, side = 64, 128, 3, 32
regular = regular_conv_macs(side, side, k, c_in, c_out)
separable = separable_conv_macs(side, side, k, c_in, c_out)
print(f"regular {regular:,} MACs, separable {separable:,} MACs")
print(f"ratio {separable / regular:.6f} vs 1/C_out + 1/k^2 = {1 / c_out + 1 / k**2:.6f}")

dw = Tensor(rng.standard_normal((c_in, 1, k, k)))
pw = Tensor(rng.standard_normal((c_out, c_in, 1, 1)))
xs = Tensor(rng.standard_normal((1, c_in, side, side)))
with T.count_macs() as tally:
    T.depthwise_separable_conv(xs, dw, pw, padding=1)
print("measured separable MACs:", f"{tally[0]:,}")
