# Train a small network on synthetic slides, then score it with pooled
# pixel curves, IOU and the 0.5% slide rule.
import time

import numpy as np

from bccseg.data import Dataset, synth_records
from bccseg.evaluation import evaluate_model
from bccseg.metrics import iso_f1_points
from bccseg.model import ModelConfig, build_model
from bccseg.train import TrainConfig, fit

ds = Dataset(synth_records(40, seed=11, width=96, height=64))
print("train", len(ds.split("train")), "test", len(ds.split("test")))

config = ModelConfig(stem_channels=8, block_channels=(16, 32, 48), middle_blocks=1, aspp_channels=32)
model = build_model(config)
print("parameters:", model.num_parameters())

t0 = time.time()
report = fit(model, ds, TrainConfig(epochs=15, batch_size=4, seed=11))
print(f"trained {len(report.steps)} steps in {time.time() - t0:.0f}s")
for epoch in range(0, len(report.epoch_loss), 3):
    print(f"  epoch {epoch + 1:2d} loss {report.epoch_loss[epoch]:.4f} pixel acc {report.epoch_pixel_acc[epoch]:.4f}")

result = evaluate_model(model, ds.split("test"))
for key, value in result.summary.items():
    print(f"{key:>18}: {value}")

print("per-image slide calls:")
for v in result.verdicts:
    print(f"  {v.id} {v.positive_pixel_count:5d}/{v.total_pixels} -> {'pos' if v.predicted else 'neg'} (truth {'pos' if v.truth else 'neg'})")

# a few points of the F1 = 0.8 reference curve; below recall 2/3 it leaves the unit square
print("iso-F1 0.8:", [(round(r, 2), round(p, 3)) for r, p in iso_f1_points(0.8, np.linspace(0.7, 1.0, 4))])
