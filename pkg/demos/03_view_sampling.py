"""How global views are drawn: recent keyframes and poorly fitted keyframes are favoured."""

import numpy as np

from splatmap.consistency import global_sampling_probs

ids = [0, 4, 8, 12, 16]
errs = [0.02, 0.02, 0.15, 0.02, 0.02]
for s1, s2 in [(0.0, 0.0), (0.2, 0.0), (0.0, 10.0), (0.2, 10.0)]:
    p = global_sampling_probs(ids, errs, 20, s1, s2)
    cells = "  ".join(f"kf{i}:{q:.3f}" for i, q in zip(ids, p))
    print(f"sigma1={s1:<4} sigma2={s2:<5} {cells}")
print("sigma1 tilts towards recent keyframes; sigma2 towards the badly fitted keyframe 8")
print(np.round(global_sampling_probs([1, 3], [0.0, 0.0], 5, 0.1, 0.0), 4), "(two-keyframe example)")
