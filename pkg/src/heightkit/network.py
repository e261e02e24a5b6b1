"""A miniature shared-encoder network with a height head and a hierarchy head.

Layout (channels-first, batch leading)::

    image (N,3,H,W)
      E1 conv3x3 3->8 + ReLU
      E2 conv3x3 stride 2 8->8 + ReLU         shared features (N,8,H/2,W/2)
      height:  H1 conv3x3 8->8 + ReLU -> up2 -> H2 conv1x1 8->1 -> sigmoid
      segment: S1 conv3x3 8->8 + ReLU -> up2 -> S2 conv1x1 8->n  (logits)

Forward and backward passes are written out by hand so that gradients can
be checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import losses

WIDTH = 8

# name -> (out_channels, in_channels, kernel, stride); None marks n_classes
LAYERS = {
    "E1": (WIDTH, 3, 3, 1),
    "E2": (WIDTH, WIDTH, 3, 2),
    "H1": (WIDTH, WIDTH, 3, 1),
    "H2": (1, WIDTH, 1, 1),
    "S1": (WIDTH, WIDTH, 3, 1),
    "S2": (None, WIDTH, 1, 1),
}


def param_shapes(n_classes: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, (cout, cin, k, _) in LAYERS.items():
        cout = n_classes if cout is None else cout
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)
    return shapes


@dataclass
class ToyDualDecoder:
    params: dict[str, np.ndarray]
    n_classes: int
    seed: int | None = None
    norm_constant: float | None = None

    @classmethod
    def init(cls, n_classes: int, seed: int = 0, dtype=np.float32) -> "ToyDualDecoder":
        """Uniform ``+-sqrt(1/fan_in)`` weights, zero biases."""
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(n_classes).items():
            if name.endswith(".w"):
                bound = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        return cls(params, n_classes, seed)

    @classmethod
    def zeros(cls, n_classes: int, dtype=np.float32) -> "ToyDualDecoder":
        return cls({k: np.zeros(s, dtype) for k, s in param_shapes(n_classes).items()}, n_classes)

    def astype(self, dtype) -> "ToyDualDecoder":
        return ToyDualDecoder(
            {k: v.astype(dtype) for k, v in self.params.items()},
            self.n_classes,
            self.seed,
            self.norm_constant,
        )

    def copy(self) -> "ToyDualDecoder":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["E1.w"].dtype

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N,Ho,Wo,C*k*k) patches of an already padded input."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x, (n, ho, wo, c, k, k), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False
    )
    return win.reshape(n, ho, wo, c * k * k)


def conv_forward(x, w, b, stride):
    k = w.shape[-1]
    pad = k // 2
    if pad:
        n, c, h, wd = x.shape
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:-pad, pad:-pad] = x
    else:
        xp = np.ascontiguousarray(x)
    cols = _im2col(xp, k, stride)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.transpose(0, 3, 1, 2), (x.shape, cols)


def conv_backward(dout, w, cache, stride):
    x_shape, cols = cache
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    pad = k // 2
    d = dout.transpose(0, 2, 3, 1)  # (N,Ho,Wo,F)
    ho, wo = d.shape[1:3]
    dw = (d.reshape(-1, f).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = d.sum(axis=(0, 1, 2))
    dcols = (d @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += dcols[
                :, :, :, :, u, v
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, db


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(d):
    n, c, h, w = d.shape
    return d.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    height: np.ndarray  # (N,H,W) in (0,1)
    logits: np.ndarray  # (N,n,H,W)
    cache: dict = field(default_factory=dict, repr=False)


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N,3,H,W) or (3,H,W) images, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"spatial dims must be even, got {x.shape[2:]}")
    return x


def forward_batch(model: ToyDualDecoder, images) -> ForwardResult:
    p = model.params
    x = _as_batch(images).astype(model.dtype, copy=False)
    cache = {}

    def conv(name, inp):
        z, c = conv_forward(inp, p[f"{name}.w"], p[f"{name}.b"], LAYERS[name][3])
        cache[name] = c
        return z

    z1 = conv("E1", x)
    a1 = np.maximum(z1, 0)
    z2 = conv("E2", a1)
    feat = np.maximum(z2, 0)

    zh1 = conv("H1", feat)
    ah1 = np.maximum(zh1, 0)
    zh2 = conv("H2", upsample2(ah1))
    height = sigmoid(zh2[:, 0])

    zs1 = conv("S1", feat)
    as1 = np.maximum(zs1, 0)
    logits = conv("S2", upsample2(as1))

    cache.update(z1=z1, z2=z2, zh1=zh1, zs1=zs1)
    return ForwardResult(height, logits, cache)


def backward_batch(model: ToyDualDecoder, fwd: ForwardResult, d_height, d_logits) -> dict[str, np.ndarray]:
    """Propagate output gradients back to every parameter."""
    p = model.params
    c = fwd.cache
    grads = {}

    def back(name, dout):
        dx, dw, db = conv_backward(dout, p[f"{name}.w"], c[name], LAYERS[name][3])
        grads[f"{name}.w"] = dw
        grads[f"{name}.b"] = db
        return dx

    h = fwd.height
    dzh2 = (d_height * h * (1 - h))[:, None]
    dah1 = upsample2_backward(back("H2", dzh2))
    dfeat = back("H1", dah1 * (c["zh1"] > 0))

    das1 = upsample2_backward(back("S2", d_logits))
    dfeat = dfeat + back("S1", das1 * (c["zs1"] > 0))

    da1 = back("E2", dfeat * (c["z2"] > 0))
    back("E1", da1 * (c["z1"] > 0))
    return {k: grads[k] for k in p}


def loss_and_grads(model, images, labels, height_target, weights: losses.LossWeights):
    """Total weighted loss over a batch and its exact parameter gradients."""
    fwd = forward_batch(model, images)
    labels = np.asarray(labels)
    target = np.asarray(height_target, dtype=fwd.height.dtype)
    if labels.ndim == 2:
        labels = labels[None]
    if target.ndim == 2:
        target = target[None]
    ce = losses.cross_entropy_array(fwd.logits, labels)
    sl1 = losses.smooth_l1_array(fwd.height, target)
    total = weights.alpha * ce + weights.beta * sl1
    d_logits = weights.alpha * losses.cross_entropy_grad(fwd.logits, labels)
    d_height = weights.beta * losses.smooth_l1_grad(fwd.height, target)
    grads = backward_batch(model, fwd, d_height.astype(fwd.height.dtype), d_logits.astype(fwd.logits.dtype))
    return float(total), grads


def backward(model, image, labels, height_target, weights: losses.LossWeights) -> dict[str, np.ndarray]:
    return loss_and_grads(model, image, labels, height_target, weights)[1]


def loss_value(model, images, labels, height_target, weights: losses.LossWeights) -> float:
    fwd = forward_batch(model, images)
    labels = np.asarray(labels)
    target = np.asarray(height_target)
    if labels.ndim == 2:
        labels = labels[None]
    if target.ndim == 2:
        target = target[None]
    return losses.weighted_total(
        weights,
        losses.cross_entropy_array(fwd.logits, labels),
        losses.smooth_l1_array(fwd.height, target.astype(fwd.height.dtype)),
    )


def forward(model: ToyDualDecoder, image) -> tuple[np.ndarray, np.ndarray]:
    """Single image ``(3,H,W)`` -> (height ``(H,W)`` in (0,1), logits ``(n,H,W)``)."""
    fwd = forward_batch(model, image)
    return fwd.height[0], fwd.logits[0]


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

# Pre-activations closer than this to zero make central differences straddle
# a ReLU kink; random check instances are redrawn until none are.
KINK_MARGIN = 1e-4


def numerical_gradients(model, images, labels, height_target, weights, step: float = 1e-5):
    """Central differences of the total loss, one parameter at a time."""
    m = model.astype(np.float64)
    grads = {}
    for name, arr in m.params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value(m, images, labels, height_target, weights)
            flat[i] = orig - step
            down = loss_value(m, images, labels, height_target, weights)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise deviation relative to the tensor's gradient scale.

    Central differences carry ~1e-10 absolute round-off at step 1e-5, so
    scaling each element by its own magnitude is meaningless for entries
    near zero; the tensor-wide maximum magnitude is used instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _min_preactivation(model, image) -> float:
    c = forward_batch(model, image).cache
    return min(float(np.abs(c[k]).min()) for k in ("z1", "z2", "zh1", "zs1"))


def random_instance(seed: int, size: int, n_classes: int = 4):
    """Random float64 model, image, labels and normalized target.

    Biases are redrawn until every ReLU input sits at least ``KINK_MARGIN``
    away from zero.
    """
    rng = np.random.default_rng(seed)
    model = ToyDualDecoder.init(n_classes, seed=seed, dtype=np.float64)
    image = rng.uniform(0, 1, size=(3, size, size))
    labels = rng.integers(0, n_classes, size=(size, size))
    target = rng.uniform(0, 1, size=(size, size))
    for _ in range(1000):
        for k in model.params:
            if k.endswith(".b"):
                model.params[k] = rng.uniform(-0.1, 0.1, size=model.params[k].shape)
        if _min_preactivation(model, image) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free instance for seed {seed}")
    return model, image, labels, target


def gradient_errors(seed: int, size: int = 6, weights: losses.LossWeights | None = None,
                    step: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error of analytic vs. numerical gradients."""
    weights = weights or losses.LossWeights()
    model, image, labels, target = random_instance(seed, size)
    _, analytic = loss_and_grads(model, image, labels, target, weights)
    numeric = numerical_gradients(model, image, labels, target, weights, step)
    return {k: relative_error(analytic[k], numeric[k]) for k in analytic}


def gradcheck(seed: int, size: int = 6, weights: losses.LossWeights | None = None,
              step: float = 1e-5) -> float:
    """Max relative error between analytic and numerical gradients."""
    return max(gradient_errors(seed, size, weights, step).values())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ToyDualDecoder, path) -> Path:
    """Raw little-endian float32 payload plus a JSON sidecar header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(param_shapes(model.n_classes))
    header = {
        "format": "toy-dual-decoder",
        "n_classes": model.n_classes,
        "seed": model.seed,
        "norm_constant": model.norm_constant,
        "layers": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
    }
    payload = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in names)
    path.write_bytes(payload)
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> ToyDualDecoder:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    params, offset = {}, 0
    for layer in header["layers"]:
        shape = tuple(layer["shape"])
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise ValueError(f"{path}: payload too short")
        params[layer["name"]] = flat[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: {flat.size - offset} trailing values")
    expected = param_shapes(header["n_classes"])
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: layer shapes do not match n_classes={header['n_classes']}")
    return ToyDualDecoder(params, header["n_classes"], header.get("seed"), header.get("norm_constant"))
