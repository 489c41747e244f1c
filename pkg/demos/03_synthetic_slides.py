# A look at the synthetic stand-in data: pink stroma with blue-violet nests.
import numpy as np

from bccseg.data import normalize, resize_record, stratified_split, synth_records, Dataset

records = synth_records(20, positive_fraction=0.48, seed=7)
ds = Dataset(records)
print("records:", len(ds), "split counts (split, label):", ds.counts())

for r in records[:6]:
    frac = (r.mask == 255).mean()
    print(f"{r.id} label={r.label} split={r.split:5s} tumor fraction={frac:.4f} mean RGB={r.image.reshape(-1, 3).mean(0).round(1)}")

pos = next(r for r in records if r.label == 1)
inside = pos.image[pos.mask == 255].mean(0)
outside = pos.image[pos.mask == 0].mean(0)
print("nest colour", inside.round(1), "stroma colour", outside.round(1))

# halve the resolution: bilinear image, nearest-neighbour mask
small = resize_record(pos, 72, 96)
print("resized", small.image.shape, "mask values", np.unique(small.mask))

x = normalize(small.image)
print("network input", x.shape, "range", float(x.data.min()), float(x.data.max()))

# re-split with a different ratio
resplit = stratified_split(ds, 0.5, seed=3)
print("50/50 split:", resplit.counts())
