# %% [markdown]
# # Reading the two metrics
#
# Height accuracy counts pixels whose height ratio stays under 1.25,
# 1.25^2 and 1.25^3, with 1 m added to both sides so bare ground is not
# a division by zero. Instance quality is mask AP at IoU 0.5.

# %%
import numpy as np

from heightkit import BBox, HeightMap, Instance, InstanceSet, ap_masks, combined_score, delta_accuracy

gt = HeightMap(np.array([[0.0, 10.0, 20.0, 4.0]]))
pred = HeightMap(np.array([[0.0, 13.0, 20.0, 8.5]]))
for level in (1, 2, 3):
    print(f"delta{level} = {delta_accuracy(pred, gt, level):.2f}")
print("13 m against 10 m: ratio %.4f" % (14 / 11))

# eps=0 is the harsh variant: any height on bare ground fails
print("0.5 m over ground, eps=0: delta3 =", delta_accuracy(HeightMap([[0.5]]), HeightMap([[0.0]]), 3, eps=0.0))

# %% [markdown]
# Two buildings, three predictions, the false positive ranked second.

# %%
def square(r, c, score=1.0):
    m = np.zeros((12, 12), bool)
    m[r:r + 3, c:c + 3] = True
    return Instance(BBox(c, r, c + 3, r + 3, score), m)


truth = InstanceSet("t", "gt", (square(0, 0), square(6, 6)), 1.0, (12, 12))
preds = [square(0, 0, 0.9), square(0, 8, 0.8), square(6, 6, 0.7)]
ap = ap_masks(preds, truth)
print("AP50 = %.5f (253/303 = %.5f)" % (ap, 253 / 303))

# %%
print("combined score for AP50 0.7730 and delta1 0.8012: %.4f" % combined_score(0.7730, 0.8012))
