# %% [markdown]
# # Fusing three noisy detectors
#
# Each simulated detector misses some buildings, jitters boxes and adds a
# false positive now and then. Weighted segmentation fusion clusters the
# boxes, averages member masks, and crops each mask to its fused box.

# %%
import numpy as np

from heightkit import FusionConfig, SceneConfig, generate_tile, nms_baseline, wsf
from heightkit.metrics import ap_report
from heightkit.synth import DetectorSim, simulate_detector

scene = SceneConfig(seed=0, tile_size=64, building_count=(4, 8), footprint_size=(5, 14))
sims = {
    "det-a": DetectorSim(recall=0.85, box_jitter=0.8, false_positives=1.0),
    "det-b": DetectorSim(recall=0.8, box_jitter=1.0, false_positives=1.5),
    "det-c": DetectorSim(recall=0.9, box_jitter=1.2, false_positives=1.0),
}
tiles = [generate_tile(scene, i) for i in range(16)]
gts = {t.tile_id: t.instances for t in tiles}
dets = {t.tile_id: [simulate_detector(t.instances, m, s, seed=0) for m, s in sims.items()] for t in tiles}

# %% [markdown]
# One tile up close: who contributed to each fused instance.

# %%
t0 = tiles[0].tile_id
for f in wsf(dets[t0])[:4]:
    print("score %.2f  box %s  members %s" % (f.score, tuple(round(v, 1) for v in f.bbox.coords), f.members))

# %%
def ap50(preds_by_tile):
    return ap_report({t: (preds_by_tile[t], gts[t]) for t in gts}).ap50


rows = {m: ap50({t: list(dets[t][k].instances) for t in gts}) for k, m in enumerate(sims)}
rows["nms"] = ap50({t: nms_baseline(dets[t]) for t in gts})
rows["wsf"] = ap50({t: wsf(dets[t], FusionConfig()) for t in gts})
for name, v in rows.items():
    print(f"{name:6s} AP50 {v:.3f}")

# %% [markdown]
# The agreement factor: a box only one detector saw keeps a third of its score.

# %%
lonely = [f for t in gts for f in wsf(dets[t]) if len(f.members) == 1]
print("single-member clusters:", len(lonely), "max score %.2f" % max(f.score for f in lonely))
print("mean members per fused instance %.2f" % np.mean([len(f.members) for t in gts for f in wsf(dets[t])]))
