#!/usr/bin/env python3
"""Look inside the probe: attention read-out, mass conservation, gradients.

Run:  python demos/02_probe_anatomy.py
"""

import numpy as np

from bugprobe import autodiff as ad
from bugprobe.probe import ProbeConfig, detect, flops_estimate, forward, init

rng = np.random.default_rng(7)

config = ProbeConfig(d_in=16, n_heads=4, n_kv_heads=2, d_head=8, d_ff=32, seed=1)
model = init(config)
print(f"probe: {config.n_heads} query heads sharing {config.n_kv_heads} kv heads, "
      f"{model.num_parameters()} parameters")

z = rng.normal(size=(10, 16)).astype(np.float32)
out = forward(model, z)
print(f"\nlast-token attention, head-averaged (sums to {out.a_bar.sum():.6f}):")
print("  " + " ".join(f"{v:.3f}" for v in out.a_bar))
print(f"bug-presence probability: {detect(model, z):.4f}")

# The same classifier logit is differentiable end to end; one backward call
# fills every parameter gradient.
loss = ad.bce_with_logits(forward(model, z).logit, 1)
ad.backward(loss)
print(f"\nloss {float(loss.data):.4f}; gradient norms per parameter:")
for name, param in model.named_parameters():
    print(f"  {name:14s} |g| = {np.linalg.norm(param.grad):.2e}")

# Inference cost grows quadratically with sequence length.
print("\nFLOP estimates:")
for T in (32, 64, 128, 256):
    print(f"  T={T:4d}: {flops_estimate(config, T):.3e}")
