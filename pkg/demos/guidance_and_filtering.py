"""
Guidance schedules and top-k filtering
======================================

Classifier-free guidance mixes conditional and unconditional logits with a
scale that may change over the decoding steps. Top-k keeps only the k most
likely entries of each subhead before sampling.
"""

import numpy as np

from elmlab.sampling import SCHEDULES, CfgSchedule, cfg_combine, cfg_schedule, top_k_filter

N = 9
print("guidance scale per step, s_min=1, s_max=3")
for kind in SCHEDULES:
    scales = cfg_schedule(CfgSchedule(kind, 1.0, 3.0, N))
    print(f"  {kind:9s}", " ".join(f"{s:.2f}" for s in scales))

# guidance pushes the distribution away from the unconditional prediction
cond = np.array([2.0, 1.0, 0.0, -1.0])
uncond = np.array([1.0, 1.0, 1.0, 1.0])
for s in (0.0, 1.0, 3.0):
    mixed = cfg_combine(cond, uncond, s)
    p = np.exp(mixed - mixed.max())
    print(f"s={s}: logits {mixed.tolist()}, top probability {p.max() / p.sum():.3f}")

# smaller k concentrates the sampling distribution
logits = np.log(np.array([0.4, 0.3, 0.15, 0.1, 0.05]))
for k in (1, 2, 5):
    kept = top_k_filter(logits, k)
    p = np.exp(kept - kept.max())
    print(f"k={k}:", np.round(p / p.sum(), 3).tolist())
