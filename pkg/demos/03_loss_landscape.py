"""Comparing the margin (anchor) loss with the bounded ratio (tritanh) loss.

The margin loss is zero on a whole half-plane and has a constant gradient
elsewhere; the ratio loss is bounded in (-1, 1], has a unique optimum
direction (pull -> 0, push -> inf), and its gradient adapts as training
approaches the optimum. Saves cross-sections to demos/output/.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from contrastad import (AnchorParams, ContrastiveDistances, TritanhParams,
                        anchor_loss, tritanh_loss)

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)


def d(dp, dq):
    return ContrastiveDistances(torch.tensor(dp, dtype=torch.float64),
                                torch.tensor(dq, dtype=torch.float64), 1, 1)


ap = AnchorParams()
tp = TritanhParams()          # lambda0 > lambda1 prioritizes pulling

# Cross-section 1: sweep d_push at fixed d_pull. The margin loss hits zero
# and stays there (many minima); the ratio loss keeps decreasing toward -1.
push = np.linspace(0, 6, 200)
anchor_vals = [float(anchor_loss(d(0.5, q), ap)) for q in push]
tritanh_vals = [float(tritanh_loss(d(0.5, q), tp)) for q in push]

zero_from = push[np.argmax(np.array(anchor_vals) == 0.0)]
print(f"margin loss is exactly 0 for every d_push >= {zero_from:.2f} at d_pull=0.5")
print(f"ratio loss keeps ordering: {tritanh_vals[50]:.3f} > {tritanh_vals[150]:.3f}")

fig, axes = plt.subplots(1, 2, figsize=(11, 4))
axes[0].plot(push, anchor_vals, label="anchor (margin)")
axes[0].plot(push, tritanh_vals, label="tritanh (bounded ratio)")
axes[0].set_xlabel("d_push (d_pull = 0.5)")
axes[0].set_ylabel("loss")
axes[0].legend()
axes[0].set_title("push sweep: margin saturates at 0, ratio approaches -1")

# Cross-section 2: along the diagonal d_pull = d_push the margin gradient is
# the constant alpha0 while the ratio gradient changes with the distance
# scale (and exceeds it for steep lambda settings).
deltas = np.linspace(0.05, 1.5, 60)
h = 1e-6
steep = TritanhParams(lambda0=3.5, lambda1=3.0, m0=0.0, m1=0.0)
for params, label in ((tp, "tritanh defaults"), (steep, "tritanh steep")):
    grads = [(float(tritanh_loss(d(x + h, x), params))
              - float(tritanh_loss(d(x - h, x), params))) / (2 * h) for x in deltas]
    axes[1].plot(deltas, grads, label=label)
axes[1].axhline(ap.alpha0, color="k", ls="--", label="anchor gradient (constant)")
axes[1].set_xlabel("delta (d_pull = d_push = delta)")
axes[1].set_ylabel("dL/d_pull")
axes[1].legend()
axes[1].set_title("pull gradient along the diagonal")

fig.tight_layout()
fig.savefig(out_dir / "loss_landscape.png", dpi=120)
print(f"figure -> {out_dir / 'loss_landscape.png'}")

# Bound check by sweep: the ratio loss stays inside (-1, 1] whenever
# m0 <= m1 + 2, for any distances.
rng = np.random.default_rng(0)
vals = []
for _ in range(20000):
    m1 = rng.uniform(0, 3)
    p = TritanhParams(rng.uniform(0.1, 3), rng.uniform(0.1, 3),
                      rng.uniform(0, min(3, m1 + 2)), m1)
    vals.append(float(tritanh_loss(d(rng.uniform(0, 6), rng.uniform(0, 6)), p)))
print(f"20k random configs: loss range [{min(vals):.4f}, {max(vals):.4f}] in (-1, 1]")
