"""
Sorting pixels by gradient before attending
===========================================

The attention block does not attend over raster order. It ranks positions
by m * o (gradient magnitude times orientation bin), splits the sorted
sequence into B segments, and attends channel-to-channel inside each
segment. Pixels with similar local structure end up sharing a segment.
"""

import numpy as np

from hogformer import hog
from hogformer import tensor as T
from hogformer.blocks import histogram_reshape, histogram_unreshape
from hogformer.data import synthetic_clean

img = synthetic_clean(3, 16)
keys = hog.hog_sort_keys(img[None])  # (1, 3, 16, 16)
flat = keys.reshape(1, 3, -1)
plan = hog.pixel_sort_plan(flat)

print("first 12 keys, raster order :", np.round(flat[0, 0, :12], 2))
print("first 12 keys, sorted order :", np.round(np.take_along_axis(flat, plan.perm, -1)[0, 0, :12], 2))
print("last 12 keys, sorted order  :", np.round(np.take_along_axis(flat, plan.perm, -1)[0, 0, -12:], 2))

# sort the image itself with the same plan, then cut it two ways
x = T.Tensor(img.reshape(1, 3, -1))
s = T.gather_axis(x, plan.perm, -1)
bins = 4
b = histogram_reshape(s, "bhogr", bins)  # few long segments: coarse groups
f = histogram_reshape(s, "fhogr", bins)  # many short segments of length B
print("\nbhogr segments", b.shape, " fhogr segments", f.shape)

# each reshape is undone exactly, and so is the sort
back = T.gather_axis(histogram_unreshape(b), plan.inv, -1)
print("roundtrip exact:", np.array_equal(back.data, x.data))

# the patch-level plan used by LDRConv moves whole 4x4 blocks instead
pplan = hog.patch_sort_plan(keys, 4)
print("patch plan, first block pixels:", pplan.perm[0, 0, :16])
