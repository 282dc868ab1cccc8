"""Plain-numpy conv net: stride-2 3x3 conv + ReLU stages, global average
pool, linear head. Forward and backward are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeMismatch

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int = 3
    stride: int = 2

    @property
    def padding(self) -> int:
        return self.kernel // 2


def _out_size(n: int, stage: ConvStage) -> int:
    return (n + 2 * stage.padding - stage.kernel) // stage.stride + 1


def default_stages(h: int, w: int, widths=(16, 32, 64, 128)) -> tuple[ConvStage, ...]:
    """``widths`` then 128-wide stages until the feature map is 1x1.

    Reaching 1x1 makes every pooled feature see the whole composite; for a
    128x128 input that is 7 stages.
    """
    stages = []
    while True:
        width = widths[len(stages)] if len(stages) < len(widths) else widths[-1]
        stages.append(ConvStage(width))
        h, w = _out_size(h, stages[-1]), _out_size(w, stages[-1])
        if max(h, w) <= 1 and len(stages) >= len(widths):
            return tuple(stages)


@dataclass(frozen=True)
class ConvNetSpec:
    in_shape: tuple[int, int, int]
    n_classes: int
    stages: tuple[ConvStage, ...] = field(default=None)

    def __post_init__(self):
        if self.stages is None:
            object.__setattr__(self, "stages", default_stages(*self.in_shape[1:]))
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, ConvStage) else ConvStage(*s) if isinstance(s, (tuple, list)) else ConvStage(s)
            for s in self.stages
        ))
        for i, (h, w) in enumerate(self.feature_sizes()[1:]):
            if h < 1 or w < 1:
                raise ShapeMismatch(f"stage {i} shrinks {self.in_shape} to an empty map")

    def feature_sizes(self) -> list[tuple[int, int]]:
        h, w = self.in_shape[1:]
        sizes = [(h, w)]
        for s in self.stages:
            h, w = _out_size(h, s), _out_size(w, s)
            sizes.append((h, w))
        return sizes

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].out_channels if self.stages else self.in_shape[0]

    def to_dict(self) -> dict:
        return {
            "in_shape": list(self.in_shape),
            "n_classes": self.n_classes,
            "stages": [[s.out_channels, s.kernel, s.stride] for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvNetSpec":
        return cls(tuple(d["in_shape"]), d["n_classes"], tuple(ConvStage(*s) for s in d["stages"]))


def init_params(spec: ConvNetSpec, seed: int, dtype=np.float32) -> Params:
    """He-uniform conv weights, zero biases; head uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    c = spec.in_shape[0]
    for i, s in enumerate(spec.stages):
        fan_in = c * s.kernel * s.kernel
        bound = np.sqrt(6.0 / fan_in)
        params[f"stage{i}.weight"] = rng.uniform(-bound, bound, (s.out_channels, c, s.kernel, s.kernel)).astype(dtype)
        params[f"stage{i}.bias"] = np.zeros(s.out_channels, dtype)
        c = s.out_channels
    bound = 1.0 / np.sqrt(c)
    params["head.weight"] = rng.uniform(-bound, bound, (spec.n_classes, c)).astype(dtype)
    params["head.bias"] = np.zeros(spec.n_classes, dtype)
    return params


def conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo), x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols)
    out += b[:, None]
    return out.reshape(n, o, ho, wo), cols


def conv2d_backward(dout, cols, x_shape, w, stride, pad):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2:]
    dflat = dout.reshape(n, o, ho * wo)
    dw = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dflat.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, dflat).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd], dw, db


def forward(params: Params, spec: ConvNetSpec, x: np.ndarray, *, keep: bool = False):
    """Logits for a batch ``(n, c, H, W)``. With ``keep=True`` also returns
    the cache that :func:`backward` needs."""
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.in_shape):
        raise ShapeMismatch(f"batch shape {x.shape} does not match net input {spec.in_shape}")
    dtype = params["head.weight"].dtype
    a = x.astype(dtype, copy=False)
    cache = []
    for i, s in enumerate(spec.stages):
        z, cols = conv2d_forward(a, params[f"stage{i}.weight"], params[f"stage{i}.bias"], s.stride, s.padding)
        if keep:
            cache.append((a.shape, cols, z > 0))
        a = np.maximum(z, 0)
    pooled = a.mean(axis=(2, 3))
    logits = pooled @ params["head.weight"].T + params["head.bias"]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    if keep:
        return logits, (cache, pooled, a.shape)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(params: Params, spec: ConvNetSpec, state, dlogits: np.ndarray) -> Params:
    cache, pooled, last_shape = state
    grads: Params = {
        "head.weight": dlogits.T @ pooled,
        "head.bias": dlogits.sum(axis=0),
    }
    n, c, h, w = last_shape
    da = np.broadcast_to((dlogits @ params["head.weight"] / (h * w))[:, :, None, None], last_shape)
    for i in reversed(range(len(spec.stages))):
        s = spec.stages[i]
        x_shape, cols, active = cache[i]
        dz = da * active
        da, gw, gb = conv2d_backward(dz, cols, x_shape, params[f"stage{i}.weight"], s.stride, s.padding)
        grads[f"stage{i}.weight"] = gw
        grads[f"stage{i}.bias"] = gb
    return grads


def loss_and_grad(params: Params, spec: ConvNetSpec, x: np.ndarray, labels) -> tuple[float, Params]:
    """Mean softmax cross-entropy over the batch and its gradient for every parameter."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= spec.n_classes:
        raise ValueError(f"labels must lie in 0..{spec.n_classes - 1}")
    logits, state = forward(params, spec, x, keep=True)
    loss = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    dlogits = softmax(logits)
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    return loss, backward(params, spec, state, dlogits.astype(logits.dtype))


def flops_estimate(spec: ConvNetSpec, in_hw: tuple[int, int] | None = None) -> int:
    """Multiply-accumulate count for one sample: ``out_c*in_c*k*k*out_h*out_w``
    per conv plus ``features*classes`` for the head. FLOPs are 2x this."""
    if in_hw is not None:
        spec = ConvNetSpec((spec.in_shape[0], *in_hw), spec.n_classes, spec.stages)
    macs = 0
    c = spec.in_shape[0]
    for s, (h, w) in zip(spec.stages, spec.feature_sizes()[1:]):
        macs += s.out_channels * c * s.kernel * s.kernel * h * w
        c = s.out_channels
    return macs + c * spec.n_classes
