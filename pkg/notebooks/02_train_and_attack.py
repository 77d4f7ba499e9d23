"""
Training three precisions and attacking them
============================================

A small conv net is trained on the bundled MNIST subset at 8-bit, binary
weight and complete binary precision, then each model is attacked with the
progressive bit-flip search until its test accuracy falls to random guess.
"""

# %%
import numpy as np

from bitflip_bnn.attack import AttackConfig, attack_batch, deploy, run_attack
from bitflip_bnn.core import accuracy
from bitflip_bnn.datasets import mnist_subset
from bitflip_bnn.models import build, precision_label
from bitflip_bnn.training import TrainConfig, train

tr, te = mnist_subset(train_size=2000)
x, y = tr.images.astype(np.float32), tr.labels
tx, ty = te.images.astype(np.float32), te.labels

# %%
# Learning rates differ per preset: the sign-activation model needs a larger
# step to move its latent weights across zero.
lrs = {"quant": 0.5, "binary_weight": 0.5, "bnn": 2.0}
models = {}
for preset, lr in lrs.items():
    net = build("convnet", preset, width=8, seed=0)
    train(net, x, y, TrainConfig(epochs=4, lr=lr, seed=0))
    models[preset] = deploy(net)
    print(f"{precision_label(net.graph):>13}: test accuracy {accuracy(net, tx, ty):.1f}%")

# %%
# One attack round per model. Every accepted flip raises the attack-batch
# loss; the report keeps the committed addresses.
cfg = AttackConfig(budget=500, rounds=1, seed=0)
ax, ay = attack_batch(tx, ty, cfg.attack_batch, cfg.seed, 0)
for preset, net in models.items():
    rep = run_attack(net, cfg, ax, ay, tx, ty)
    print(f"{preset:>13}: CA {rep.ca:.1f} -> PA {rep.pa:.1f} after {rep.n_flips} flips ({rep.status}); "
          f"flips per layer {rep.histogram}")

# %%
# The loss trace of the last run: monotone by construction.
print([round(r.loss_after, 3) for r in rep.records[:10]])
