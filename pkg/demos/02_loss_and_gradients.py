"""The staged loss on a toy prediction, and a finite-difference check of its gradient.

Run: python3 demos/02_loss_and_gradients.py
"""

import numpy as np

from synthct import gradsuite
from synthct.loss import LossSchedule, RandomPyramidExtractor, hu_weight_map, staged_loss
from synthct.phantom import PhantomConfig, generate_pair
from synthct.tensor import Tensor, precision

# Voxel weights emphasise bone (3) over soft tissue (1.5) and air (0.5).
print("weights at -1000, 0, 700 HU:", hu_weight_map(np.array([-1000.0, 0.0, 700.0])))

ct = generate_pair(PhantomConfig(shape=(16, 32, 32), seed=1)).ct.data.astype(np.float64)
target = ct[None, None, :, :16, :16]
pred = np.clip(target + np.random.default_rng(0).normal(0, 80, target.shape), -1024, 1500)

schedule = LossSchedule(switch_epoch=100)
extractor = RandomPyramidExtractor()
with precision(np.float64):
    for epoch in (99, 100):
        loss, terms = staged_loss(epoch, Tensor(pred), target, schedule, extractor)
        shown = ", ".join(f"{k}={v:.4f}" for k, v in terms.items())
        print(f"epoch {epoch}: total {float(loss.data):.4f} ({shown})")

# Every differentiable piece is checked against central differences in 64-bit.
for name in ("staged_loss/before_switch", "staged_loss/after_switch", "selective_scan"):
    print(gradsuite.run_check(name).line())
