"""Span masking: how the mask-start probability maps to input coverage.

Samples masks at several probabilities, compares Monte Carlo coverage to the
exact expectation, and shows the noise substitution and target derivation.
"""

import numpy as np

from rqspeech.masking import MaskConfig, apply_mask, coverage_estimate, sample_mask
from rqspeech.seeding import keyed_rng

frames = 4000
span = 40
print(f"{'prob':>6} {'monte carlo':>12} {'analytic':>10}")
for prob in (0.01, 0.05, 0.15, 0.25, 0.4):
    cfg = MaskConfig(prob=prob, span_frames=span)
    mc = coverage_estimate(cfg, frames, trials=200, rng=keyed_rng(0, str(prob)))
    t = np.arange(frames)
    exact = np.mean(1.0 - (1.0 - prob) ** np.minimum(t + 1, span))
    print(f"{prob:6.2f} {mc:12.4f} {exact:10.4f}")

# one concrete plan: inputs on the 10 ms grid, targets on the 40 ms grid
cfg = MaskConfig(prob=0.05, span_frames=span)
plan = sample_mask(200, cfg, keyed_rng(3, "demo"))
print(f"\n200-frame plan: {plan.input_mask.sum()} masked input frames, "
      f"{plan.target_mask.sum()} of {plan.target_mask.size} label frames are targets")
print("mask (first 80 frames):",
      "".join("#" if m else "." for m in plan.input_mask[:80]))

# noise substitution leaves unmasked frames untouched
mel = np.zeros((200, 80), dtype=np.float32)
noised = apply_mask(mel, plan, cfg, keyed_rng(3, "noise"))
kept = ~plan.input_mask
print(f"unmasked frames unchanged: {np.array_equal(noised[kept], mel[kept])}")
print(f"masked frames are Normal(0, 0.1^2): mean {noised[plan.input_mask].mean():+.4f}, "
      f"std {noised[plan.input_mask].std():.4f}")
