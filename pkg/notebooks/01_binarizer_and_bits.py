"""
Binarizer schedule and the bit view of weights
==============================================

The training-time binarizer is a smooth odd function that sharpens into
``sign`` as training proceeds. The attack works on the stored integer
codes of each layer, so we also look at how a single bit flip moves a
weight.
"""

# %%
# The schedule sweeps ``t`` from 0.01 to 10 over T iterations, with
# ``k = max(1/t, 1)``; the curve starts wide and flat and ends as a step.
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from bitflip_bnn.binarizer import binarize_backward, binarize_forward, schedule_tk

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

z = np.linspace(-2, 2, 801)
fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
for i in (10, 15, 20, 25, 30):
    t, k = schedule_tk(i, 30)
    a1.plot(z, binarize_forward(z, t, k) / k, label=f"i={i}, t={t:.2f}")
    a2.plot(z, binarize_backward(z, t, k), label=f"i={i}")
a1.set_title("f(z) / k")
a2.set_title("f'(z)")
a2.set_yscale("symlog")
a1.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "binarizer_schedule.png", dpi=120)

# %%
# At the end of the schedule the forward pass is exactly the sign outside a
# band of half-width sqrt(2)/10.
t, k = schedule_tk(30, 30)
print("t, k at i=T:", t, k)
print("f(0.2), f(-0.2):", binarize_forward(0.2, t, k), binarize_forward(-0.2, t, k))

# %%
# Quantization: per-layer symmetric scale and two's complement codes.
from bitflip_bnn.quantizer import BitAddress, bit_flip_deltas, bit_matrix, dequantize, flip_bit, quantize_layer

w = np.array([-1.0, 0.5, 1.0])
qw = quantize_layer(w, 4)
print("codes:", qw.codes, "scale:", qw.scale)
print("bits (MSB first):", ["".join(map(str, r[::-1])) for r in bit_matrix(qw)])

# %%
# Flipping the sign bit of the largest code turns +7 into -1. The table of
# value changes is what the attack multiplies with the weight gradient.
flipped = flip_bit(qw, BitAddress(0, 2, 3))
print("after sign flip:", flipped.codes, dequantize(flipped))
print("value change per bit:\n", bit_flip_deltas(qw))
