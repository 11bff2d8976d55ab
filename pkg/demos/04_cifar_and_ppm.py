# Reading CIFAR-10 records, seeded batches, and writing a PPM contact sheet.
import sys
from pathlib import Path

import numpy as np

from simplegrowth.data import BatchIterator, load_cifar10_bin, read_ppm, write_ppm_grid

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

ds = load_cifar10_bin(DATA / "cifar10_train_256.bin")
names = "airplane automobile bird cat deer dog frog horse ship truck".split()
print(len(ds), "images", ds.images.shape, ds.images.dtype, "range", ds.images.min(), ds.images.max())
print("first labels:", [names[i] for i in ds.labels[:8]])

it = BatchIterator(ds, 16, seed=0)
seen = np.concatenate(list(it.epoch_batches(0)))
print(len(it), "batches per epoch; every index once:", np.array_equal(np.sort(seen), np.arange(len(ds))))

write_ppm_grid(ds.images[:16], 4, out / "cifar_first16.ppm")
pix = read_ppm(out / "cifar_first16.ppm")
print("wrote", out / "cifar_first16.ppm", pix.shape)
