"""Train the SSM model and the plain U-Net on the same phantoms and compare held-out error.

Run: python3 demos/03_compare_models.py --epochs 20
(200 epochs reproduce the acceptance run and take about 15 minutes per model on one core.)
"""

import argparse
import tempfile

from threadpoolctl import threadpool_limits

from synthct.model import MAMBA_LITE, UNET_LITE, ModelConfig
from synthct.phantom import PhantomConfig, case_seed, generate_pair, split_cases
from synthct.preprocess import RawCase, preprocess_cases
from synthct.trainer import TrainConfig, train

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--cases", type=int, default=20)
args = parser.parse_args()

ids = [f"case_{i:03d}" for i in range(args.cases)]
split = split_cases(ids, seed=0)
raw = []
for i, cid in enumerate(ids):
    p = generate_pair(PhantomConfig(seed=case_seed(0, i)))
    raw.append(RawCase(cid, p.mri, p.ct, p.outline, split[cid]))
data = preprocess_cases(raw)
print(f"{len(data.split('train'))} train / {len(data.split('test'))} held-out cases")

for variant in (MAMBA_LITE, UNET_LITE):
    cfg = TrainConfig(epochs=args.epochs, switch_epoch=args.epochs // 2, patches_per_epoch=8,
                      val_every=max(1, args.epochs // 4), checkpoint_every=args.epochs,
                      model=ModelConfig(variant=variant, base_channels=8))
    with tempfile.TemporaryDirectory() as out, threadpool_limits(1):
        res = train(cfg, data, out)
    curve = "  ".join(f"{v['epochs_trained']}:{v['val_wmae']:.0f}" for v in res.validation)
    first, last = res.validation[0]["val_wmae"], res.validation[-1]["val_wmae"]
    print(f"{variant:>10} ({res.model.parameter_count()} params)  held-out wMAE by epoch  {curve}  "
          f"(-{100 * (1 - last / first):.0f}%)")
