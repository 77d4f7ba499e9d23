"""
Growing a binary network
========================

Starting from a x1 complete BNN, stage 1 preallocates four times the
channels and learns one mask per channel; channels switch on and stay on.
Stage 1 stops once the channel counts settle, and stage 2 retrains the
reconstructed model.
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from bitflip_bnn.core import accuracy
from bitflip_bnn.datasets import mnist_subset
from bitflip_bnn.growth import GrowthConfig, early_growth
from bitflip_bnn.models import build
from bitflip_bnn.training import TrainConfig, train

tr, te = mnist_subset(train_size=2000)
x, y = tr.images.astype(np.float32), tr.labels
tx, ty = te.images.astype(np.float32), te.labels
tc = TrainConfig(epochs=4, lr=2.0, seed=0)

# %%
base = build("convnet", "bnn", width=4, seed=0)
train(base, x, y, tc)
print(f"x1 BNN: {accuracy(base, tx, ty):.1f}%")

# %%
res = early_growth(build("convnet", "bnn", width=4, seed=0), x, y, GrowthConfig(max_multiplier=4), tc, tc)
print("converged:", res.state.converged, "after", res.state.epochs, "epochs")
print("widths:", res.widths, "capacity:", res.state.capacity)
print(f"grown BNN: {accuracy(res.model, tx, ty):.1f}%")

# %%
# Active channels per layer at each growth check.
out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)
fig, ax = plt.subplots(figsize=(4.5, 3))
for layer in res.state.capacity:
    ax.plot([h[layer] for h in res.state.history], marker=".", label=f"layer {layer}")
ax.set_xlabel("epoch")
ax.set_ylabel("active channels")
ax.legend()
fig.tight_layout()
fig.savefig(out / "growth.png", dpi=120)
