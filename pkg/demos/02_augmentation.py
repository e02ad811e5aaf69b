"""Eightfold expansion of one image and how much each low-rank copy keeps.

Run: python3 demos/02_augmentation.py
"""

import numpy as np

from enas_us.datapipe import Label, RoiImage, augment_all, resize_bicubic, svd_rank, synthetic_stripes

img = resize_bicubic(synthetic_stripes(1, 16, seed=4)[0], side=100)
print("original", img.pixels.shape, img.label.name)

for variant in augment_all(img):
    diff = np.abs(variant.pixels.astype(int) - img.pixels).mean()
    print(f"{variant.provenance.value:>8}: mean abs difference {diff:6.2f}")

for ratio in (0.45, 0.35, 0.25):
    print(f"ratio {ratio:.2f} keeps rank {svd_rank(img.pixels.shape, ratio)} of 100")

# a smooth image barely changes under truncation
ramp = RoiImage(np.add.outer(np.arange(40), np.arange(40)).astype(np.uint8), Label.BENIGN, "ramp")
print("ramp, 25%:", np.abs(augment_all(ramp)[-1].pixels.astype(int) - ramp.pixels).max(), "levels at most")
