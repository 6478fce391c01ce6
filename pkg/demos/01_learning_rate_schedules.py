#!/usr/bin/env python3
"""Learning-rate machinery: linear/sqrt scaling, warmup ramps, milestone decay.

Walks through the schedule a large-minibatch run actually sees, printing the
lr at interesting iterations.
"""

from mbsgd.solver import SolverConfig, linear_scaled_lr, lr_at, sqrt_scaled_lr

# The linear scaling rule: multiply the lr by k when the minibatch grows by k.
# With a reference of 0.1 at total minibatch 256:
for kn in (256, 512, 1024, 8192):
    print(f"kn={kn:5d}  linear lr={linear_scaled_lr(0.1, kn, 256):<6g} "
          f"sqrt lr={sqrt_scaled_lr(0.1, kn, 256):.4f}")
print()

# A full schedule: gradual warmup over 5 epochs to the scaled target, then
# 10x decay at the milestone epochs.
cfg = SolverConfig(
    base_lr=0.1, ref_kn=256, warmup="gradual", warmup_epochs=5,
    milestones=(30, 60, 80), decay_factor=0.1, scaling="linear",
)
kn = 8192
iters_per_epoch = 20

print("epoch  iteration  lr")
for epoch in (0, 1, 2, 4, 5, 10, 29, 30, 59, 60, 79, 80, 89):
    it = epoch * iters_per_epoch
    print(f"{epoch:5d}  {it:9d}  {lr_at(cfg, kn, it, iters_per_epoch):.6f}")

print()
print("warmup ramp, iteration by iteration (first epoch):")
for it in range(0, 21, 4):
    lr = lr_at(cfg, kn, it, iters_per_epoch)
    bar = "#" * int(60 * lr / 3.2)
    print(f"  iter {it:3d}  lr={lr:6.4f}  {bar}")

# Constant warmup holds the small-minibatch lr flat, then jumps.
cfg_const = SolverConfig(
    base_lr=0.1, ref_kn=256, warmup="constant", warmup_epochs=5,
    milestones=(30, 60, 80), scaling="linear",
)
print()
print("constant warmup boundary:")
for it in (99, 100, 101):
    print(f"  iter {it}: lr={lr_at(cfg_const, kn, it, iters_per_epoch):.4f}")
