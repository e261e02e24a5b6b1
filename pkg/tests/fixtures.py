"""Random fusion fixtures shared by the fusion and acceptance tests."""

import numpy as np

from heightkit.raster import BBox, Instance, InstanceSet

SIZE = (12, 12)


def random_box(rng, size=SIZE):
    h, w = size
    x0 = rng.integers(0, w - 2) + rng.choice([0.0, 0.5, rng.random()])
    y0 = rng.integers(0, h - 2) + rng.choice([0.0, 0.5, rng.random()])
    x1 = min(w, x0 + 1 + rng.integers(1, 7) + rng.random())
    y1 = min(h, y0 + 1 + rng.integers(1, 7) + rng.random())
    return float(x0), float(y0), float(x1), float(y1)


def random_mask(rng, box, size=SIZE, prob=False):
    h, w = size
    rows, cols = np.mgrid[0:h, 0:w]
    x0, y0, x1, y1 = box
    # a blob around the box, spilling a pixel past it so the crop matters
    near = (cols + 0.5 >= x0 - 1) & (cols + 0.5 <= x1 + 1) & (rows + 0.5 >= y0 - 1) & (rows + 0.5 <= y1 + 1)
    if prob:
        m = np.where(near, rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size), 0.0)
    else:
        m = near & (rng.random(size) < 0.8)
    return m


def random_sets(rng, max_boxes=6, max_models=3, size=SIZE):
    """Up to ``max_boxes`` boxes over up to ``max_models`` models, with ties and jittered copies."""
    n_models = int(rng.integers(1, max_models + 1))
    n_boxes = int(rng.integers(1, max_boxes + 1))
    prob = bool(rng.random() < 0.5)
    scores = [0.3, 0.5, 0.5, 0.9]
    owners = [int(rng.integers(0, n_models)) for _ in range(n_boxes)]
    base = []
    items = [[] for _ in range(n_models)]
    for owner in owners:
        if base and rng.random() < 0.5:
            # jittered copy of an earlier box, so clusters actually form
            b = base[int(rng.integers(0, len(base)))]
            d = rng.choice([0.0, 0.5, 1.0])
            box = (b[0] + d, b[1], min(size[1], b[2] + d), b[3])
        else:
            box = random_box(rng, size)
        base.append(box)
        score = float(rng.choice(scores)) if rng.random() < 0.5 else float(np.round(rng.random(), 3))
        items[owner].append(Instance(BBox(*box, score=score), random_mask(rng, box, size, prob)))
    weights = [float(rng.choice([1.0, 1.0, 2.0, 0.5])) for _ in range(n_models)]
    return [InstanceSet("t", f"m{k}", tuple(items[k]), weights[k], size) for k in range(n_models)]


def as_reference(sets):
    return [
        {
            "model_id": s.model_id,
            "weight": s.model_weight,
            "instances": [(i.bbox.coords, i.score, i.mask.tolist()) for i in s.instances],
        }
        for s in sets
    ]
