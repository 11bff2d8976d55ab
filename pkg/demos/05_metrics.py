# SSIM, MS-SSIM and the Frechet distance on controlled inputs.
from pathlib import Path

import numpy as np

from simplegrowth.data import load_cifar10_bin
from simplegrowth.metrics import embed, fid_from_features, ms_ssim, ssim

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"
img = load_cifar10_bin(DATA / "cifar10_test_512.bin").images[0].astype(np.float64)
rng = np.random.default_rng(3)

print("ssim(x, x) =", ssim(img, img))
for sigma in (0.02, 0.05, 0.1, 0.2):
    noisy = np.clip(img + rng.normal(0, sigma, img.shape), 0, 1)
    print(f"noise {sigma:4}: ssim {ssim(img, noisy):.4f}  ms_ssim {ms_ssim(img, noisy):.4f}")

c1 = 0.01 ** 2
print("black vs white:", ssim(np.zeros((3, 16, 16)), np.ones((3, 16, 16))), "closed form", c1 / (1 + c1))

# Frechet distance between Gaussian fits of features; two 1-D examples with known answers
print("N(0,1) vs N(1,1):", fid_from_features(rng.normal(0, 1, (20000, 1)), rng.normal(1, 1, (20000, 1))), "(expect ~1)")
print("N(0,1) vs N(0,4):", fid_from_features(rng.normal(0, 1, (20000, 1)), rng.normal(0, 2, (20000, 1))), "(expect ~1)")

ds = load_cifar10_bin(DATA / "cifar10_test_512.bin")
a, b = ds.images[:256], ds.images[256:]
print("raw_pool distance, two halves of the test fixture:", fid_from_features(embed(a), embed(b)))
flat = 0.5 * a + 0.25
print("same images with contrast halved:", fid_from_features(embed(a), embed(flat)))
