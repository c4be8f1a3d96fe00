"""Desk-scale multi-channel 3D U-Net with hand-derived backward passes.

Tensors are numpy arrays of shape (batch, channels, dx, dy, dz). The
encoder runs conv-relu twice then 2x2x2 max pooling per level, a two-conv
bottleneck, and the decoder mirrors it with transposed convolutions and
skip concatenations, ending in a 1x1x1 convolution plus logistic sigmoid,
so the output matches the input resolution. Soft Dice is the loss.

All convolution arithmetic lives in numba kernels (see _kernels); the
wrappers here add padding, shape checks and the chain rule. Training math
is float32; gradient checking runs the same code in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from vesselpipe import _kernels
from vesselpipe.errors import FormatError

DICE_EPS = 1e-6

CHECKPOINT_MAGIC = b"VPNET1\x00"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    """U-Net topology. The input spatial edge must be divisible by
    2 ** len(levels)."""

    in_channels: int = 2
    levels: tuple[int, ...] = (16, 32, 64)
    bottleneck_channels: int = 128
    out_channels: int = 1

    def __post_init__(self):
        self.levels = tuple(int(w) for w in self.levels)
        if not self.levels:
            raise ValueError("levels must be nonempty")
        if any(w < 1 for w in self.levels) or self.bottleneck_channels < 1:
            raise ValueError("channel widths must be >= 1")
        if self.in_channels < 1 or self.out_channels != 1:
            raise ValueError("need in_channels >= 1 and out_channels == 1")


def param_spec(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list defining the architecture's parameters."""
    spec = []
    prev = config.in_channels
    for i, width in enumerate(config.levels):
        spec.append((f"enc{i}_conv1_w", (width, prev, 3, 3, 3)))
        spec.append((f"enc{i}_conv1_b", (width,)))
        spec.append((f"enc{i}_conv2_w", (width, width, 3, 3, 3)))
        spec.append((f"enc{i}_conv2_b", (width,)))
        prev = width
    cb = config.bottleneck_channels
    spec.append(("bottleneck_conv1_w", (cb, prev, 3, 3, 3)))
    spec.append(("bottleneck_conv1_b", (cb,)))
    spec.append(("bottleneck_conv2_w", (cb, cb, 3, 3, 3)))
    spec.append(("bottleneck_conv2_b", (cb,)))
    prev = cb
    for i in reversed(range(len(config.levels))):
        width = config.levels[i]
        spec.append((f"dec{i}_up_w", (prev, width, 2, 2, 2)))
        spec.append((f"dec{i}_up_b", (width,)))
        spec.append((f"dec{i}_conv1_w", (width, 2 * width, 3, 3, 3)))
        spec.append((f"dec{i}_conv1_b", (width,)))
        spec.append((f"dec{i}_conv2_w", (width, width, 3, 3, 3)))
        spec.append((f"dec{i}_conv2_b", (width,)))
        prev = width
    spec.append(("out_w", (config.out_channels, config.levels[0], 1, 1, 1)))
    spec.append(("out_b", (config.out_channels,)))
    return spec


def init_params(config: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-style fan-in scaled uniform weights, zero biases, seeded.

    The output bias starts at -2 so an untrained net predicts background,
    matching the sparse foreground prior; Dice training then spends no
    steps deflating a half-gray prediction.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_spec(config):
        if name == "out_b":
            params[name] = np.full(shape, -2.0, dtype=dtype)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def _pad1(x: np.ndarray) -> np.ndarray:
    B, C, D, H, W = x.shape
    xp = np.zeros((B, C, D + 2, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    return xp


# Feature maps at least this large run in the numba kernels; smaller ones
# go through BLAS (tensordot per tap), which wins when rows are too short
# to vectorize.
_NUMBA_MIN_EDGE = 24


def _conv_fwd_core(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    B, C, D, H, W = x.shape
    O = w.shape[0]
    if min(D, H, W) >= _NUMBA_MIN_EDGE:
        y = np.empty((B, O, D, H, W), dtype=x.dtype)
        _kernels.conv3d_fwd(_pad1(x), w, b.astype(x.dtype), y)
        return y
    xp = _pad1(x)
    acc = np.zeros((B, D, H, W, O), dtype=x.dtype)
    for a in range(3):
        for bb in range(3):
            for cc in range(3):
                acc += np.tensordot(xp[:, :, a:a + D, bb:bb + H, cc:cc + W],
                                    w[:, :, a, bb, cc], axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(acc, -1, 1)) + b.reshape(1, O, 1, 1, 1).astype(x.dtype)


def _conv_dw_core(x: np.ndarray, dy: np.ndarray, kshape) -> np.ndarray:
    B, C, D, H, W = x.shape
    if min(D, H, W) >= _NUMBA_MIN_EDGE:
        dw = np.empty(kshape, dtype=x.dtype)
        _kernels.conv3d_bwd_w(_pad1(x), dy, dw)
        return dw
    xp = _pad1(x)
    dw = np.empty(kshape, dtype=x.dtype)
    for a in range(3):
        for bb in range(3):
            for cc in range(3):
                dw[:, :, a, bb, cc] = np.tensordot(
                    dy, xp[:, :, a:a + D, bb:bb + H, cc:cc + W],
                    axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return dw


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3x3 same-padding cross-correlation, stride 1."""
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ValueError(f"bad conv shapes x{x.shape} w{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    return _conv_fwd_core(x, w, b)


def conv3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients (dx, dw, db) of conv3d for upstream gradient dy.

    The input gradient is the full correlation of dy with the kernel,
    which is the forward pass again with in/out channels transposed and
    the taps spatially flipped.
    """
    w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    dx = _conv_fwd_core(dy, w_t, np.zeros(w_t.shape[0], dtype=dy.dtype))
    dw = _conv_dw_core(x, dy, w.shape)
    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient is masked where the pre-activation was <= 0 (0 at exactly 0)."""
    return np.where(x > 0, dy, x.dtype.type(0))


def maxpool3d(x: np.ndarray):
    """2x2x2 max pooling, stride 2. Returns (pooled, argmax record)."""
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(D, H, W)}")
    y = np.empty((B, C, D // 2, H // 2, W // 2), dtype=x.dtype)
    arg = np.empty(y.shape, dtype=np.int8)
    _kernels.maxpool_fwd(x, y, arg)
    return y, arg


def maxpool3d_backward(arg: np.ndarray, dy: np.ndarray) -> np.ndarray:
    B, C, D2, H2, W2 = dy.shape
    dx = np.empty((B, C, D2 * 2, H2 * 2, W2 * 2), dtype=dy.dtype)
    _kernels.maxpool_bwd(dy, arg, dx)
    return dx


def upconv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution, kernel 2x2x2, stride 2; doubles spatial dims.

    Weights are (in_channels, out_channels, 2, 2, 2).
    """
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[0]}")
    B, C, D, H, W = x.shape
    y = np.empty((B, w.shape[1], 2 * D, 2 * H, 2 * W), dtype=x.dtype)
    _kernels.upconv3d_fwd(x, w, b.astype(x.dtype), y)
    return y


def upconv3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    dx = np.empty_like(x)
    _kernels.upconv3d_bwd_x(dy, w, dx)
    dw = np.empty_like(w)
    _kernels.upconv3d_bwd_w(x, dy, dw)
    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


def _conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    wm = w[:, :, 0, 0, 0]
    y = np.tensordot(x, wm, axes=([1], [1]))
    return np.moveaxis(y, -1, 1) + b.reshape(1, -1, 1, 1, 1)


def _conv1x1_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    wm = w[:, :, 0, 0, 0]
    dx = np.moveaxis(np.tensordot(dy, wm, axes=([1], [0])), -1, 1)
    dwm = np.tensordot(dy, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = dy.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx), dwm.reshape(w.shape), db


def _forward(x: np.ndarray, params: dict, config: NetConfig):
    """Forward pass; returns (probabilities, cache for backward)."""
    factor = 2 ** len(config.levels)
    if any(s % factor for s in x.shape[2:]):
        raise ValueError(f"input edge {x.shape[2:]} not divisible by {factor}")
    if x.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {x.shape[1]}")

    cache = {"x": x, "pre": [], "skips": []}
    cur = x
    for i in range(len(config.levels)):
        for j in (1, 2):
            w, b = params[f"enc{i}_conv{j}_w"], params[f"enc{i}_conv{j}_b"]
            z = conv3d(cur, w, b)
            cache[f"enc{i}_conv{j}_in"] = cur
            cache[f"enc{i}_conv{j}_z"] = z
            cur = relu(z)
        cache["skips"].append(cur)
        cur, arg = maxpool3d(cur)
        cache[f"enc{i}_poolarg"] = arg

    for j in (1, 2):
        w, b = params[f"bottleneck_conv{j}_w"], params[f"bottleneck_conv{j}_b"]
        z = conv3d(cur, w, b)
        cache[f"bottleneck_conv{j}_in"] = cur
        cache[f"bottleneck_conv{j}_z"] = z
        cur = relu(z)

    for i in reversed(range(len(config.levels))):
        w, b = params[f"dec{i}_up_w"], params[f"dec{i}_up_b"]
        cache[f"dec{i}_up_in"] = cur
        up = upconv3d(cur, w, b)
        skip = cache["skips"][i]
        cur = np.concatenate([up, skip], axis=1)
        for j in (1, 2):
            w, b = params[f"dec{i}_conv{j}_w"], params[f"dec{i}_conv{j}_b"]
            z = conv3d(cur, w, b)
            cache[f"dec{i}_conv{j}_in"] = cur
            cache[f"dec{i}_conv{j}_z"] = z
            cur = relu(z)

    cache["out_in"] = cur
    logits = _conv1x1(cur, params["out_w"], params["out_b"])
    probs = expit(logits).astype(x.dtype)
    cache["probs"] = probs
    return probs, cache


def _backward(dprobs: np.ndarray, params: dict, config: NetConfig, cache: dict) -> dict:
    """Chain rule through the cached forward pass; returns parameter grads."""
    grads = {}
    probs = cache["probs"]
    dz = dprobs * probs * (1 - probs)

    dcur, grads["out_w"], grads["out_b"] = _conv1x1_backward(
        cache["out_in"], params["out_w"], dz)

    n_levels = len(config.levels)
    for i in range(n_levels):
        for j in (2, 1):
            z = cache[f"dec{i}_conv{j}_z"]
            dz = relu_backward(z, dcur)
            dcur, grads[f"dec{i}_conv{j}_w"], grads[f"dec{i}_conv{j}_b"] = conv3d_backward(
                cache[f"dec{i}_conv{j}_in"], params[f"dec{i}_conv{j}_w"], dz)
        width = config.levels[i]
        dup, dskip = dcur[:, :width], dcur[:, width:]
        dcur, grads[f"dec{i}_up_w"], grads[f"dec{i}_up_b"] = upconv3d_backward(
            cache[f"dec{i}_up_in"], params[f"dec{i}_up_w"], np.ascontiguousarray(dup))
        cache[f"dskip{i}"] = dskip

    # dcur now flows into the bottleneck output
    for j in (2, 1):
        z = cache[f"bottleneck_conv{j}_z"]
        dz = relu_backward(z, dcur)
        dcur, grads[f"bottleneck_conv{j}_w"], grads[f"bottleneck_conv{j}_b"] = conv3d_backward(
            cache[f"bottleneck_conv{j}_in"], params[f"bottleneck_conv{j}_w"], dz)

    for i in reversed(range(n_levels)):
        dpool = maxpool3d_backward(cache[f"enc{i}_poolarg"], dcur)
        dcur = dpool + np.ascontiguousarray(cache[f"dskip{i}"])
        for j in (2, 1):
            z = cache[f"enc{i}_conv{j}_z"]
            dz = relu_backward(z, dcur)
            dcur, grads[f"enc{i}_conv{j}_w"], grads[f"enc{i}_conv{j}_b"] = conv3d_backward(
                cache[f"enc{i}_conv{j}_in"], params[f"enc{i}_conv{j}_w"], dz)
    return grads


def unet_forward(x: np.ndarray, params: dict, config: NetConfig) -> np.ndarray:
    """Probability map with the same spatial dims as the input, in (0, 1)."""
    probs, _ = _forward(x, params, config)
    return probs


def dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS):
    """Soft Dice loss and its analytic gradient with respect to pred.

    D = (2 sum(p g) + eps) / (sum p + sum g + eps); loss = 1 - D. The eps
    makes an empty target with a near-empty prediction score a loss near
    0 instead of dividing by zero; background-only patches are half the
    training set, so this case is routine.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    g = target.astype(pred.dtype)
    num = 2.0 * float((pred * g).sum()) + eps
    den = float(pred.sum()) + float(g.sum()) + eps
    loss = 1.0 - num / den
    dpred = -(2.0 * g * den - num) / (den * den)
    return loss, dpred.astype(pred.dtype)


def unet_loss_and_grads(x: np.ndarray, target: np.ndarray, params: dict, config: NetConfig):
    """Dice loss of the forward pass and gradients for every parameter."""
    probs, cache = _forward(x, params, config)
    loss, dprobs = dice_loss(probs, target)
    grads = _backward(dprobs, params, config, cache)
    return loss, grads, probs


# --- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def zeros_like(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adam_step(params: dict, grads: dict, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update. Pure: returns new params and state."""
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        new_params[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, t)


# --- gradient checking ----------------------------------------------------


def _relu_signs(cache: dict) -> np.ndarray:
    keys = sorted(k for k in cache if k.endswith("_z"))
    return np.concatenate([(cache[k] > 0).ravel() for k in keys])


def gradient_check(config: NetConfig | None = None, seed: int = 0,
                   eps: float = 1e-3, num_params: int = 200, edge: int = 8) -> float:
    """Max relative error of analytic vs central finite-difference grads.

    Runs a tiny network in float64 over >= num_params randomly chosen
    parameters. Inputs are drawn away from zero, and any probe whose
    finite-difference step flips a ReLU activation pattern is re-evaluated
    with a smaller step, since the loss is only piecewise smooth there.
    """
    if config is None:
        config = NetConfig(in_channels=2, levels=(2, 4), bottleneck_channels=8)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 1.0, size=(1, config.in_channels, edge, edge, edge))
    target = (rng.random((1, 1, edge, edge, edge)) < 0.3).astype(np.float64)
    params = init_params(config, seed=seed + 1, dtype=np.float64)

    def loss_and_signs(ps):
        probs, cache = _forward(x, ps, config)
        loss, _ = dice_loss(probs, target)
        return loss, _relu_signs(cache)

    _, grads, _ = unet_loss_and_grads(x, target, params, config)

    names = [n for n, _ in param_spec(config)]
    picks = []
    for _ in range(num_params):
        name = names[rng.integers(len(names))]
        picks.append((name, int(rng.integers(params[name].size))))

    max_rel = 0.0
    for name, flat_idx in picks:
        analytic = float(grads[name].ravel()[flat_idx])
        step = eps
        numeric = None
        for _attempt in range(6):
            plus = {k: v for k, v in params.items()}
            pv = params[name].copy()
            pv.ravel()[flat_idx] += step
            plus[name] = pv
            minus = {k: v for k, v in params.items()}
            mv = params[name].copy()
            mv.ravel()[flat_idx] -= step
            minus[name] = mv
            lp, sp = loss_and_signs(plus)
            lm, sm = loss_and_signs(minus)
            numeric = (lp - lm) / (2.0 * step)
            if np.array_equal(sp, sm):
                break
            step *= 0.25  # ReLU kink crossed: shrink the probe
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


def gradient_check_conv(seed: int = 0, eps: float = 1e-5,
                        shape=(2, 3, 4, 4, 4), out_channels: int = 2) -> float:
    """Finite-difference check of a single conv layer under a quadratic
    loss L = 0.5 * sum(conv(x)^2); central differences are exact there."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((out_channels, shape[1], 3, 3, 3))
    b = rng.standard_normal(out_channels)

    y = conv3d(x, w, b)
    _, dw, db = conv3d_backward(x, w, y)

    max_rel = 0.0
    for flat_idx in rng.integers(w.size, size=50):
        wp, wm = w.copy(), w.copy()
        wp.ravel()[flat_idx] += eps
        wm.ravel()[flat_idx] -= eps
        lp = 0.5 * float((conv3d(x, wp, b) ** 2).sum())
        lm = 0.5 * float((conv3d(x, wm, b) ** 2).sum())
        numeric = (lp - lm) / (2 * eps)
        analytic = float(dw.ravel()[flat_idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    for i in range(b.size):
        bp, bm = b.copy(), b.copy()
        bp[i] += eps
        bm[i] -= eps
        lp = 0.5 * float((conv3d(x, w, bp) ** 2).sum())
        lm = 0.5 * float((conv3d(x, w, bm) ** 2).sum())
        numeric = (lp - lm) / (2 * eps)
        rel = abs(float(db[i]) - numeric) / max(abs(float(db[i])), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


# --- checkpoint serialization ---------------------------------------------


@dataclass
class Checkpoint:
    """Network parameters plus optimizer state, bound to a topology."""

    config: NetConfig
    params: dict
    opt: AdamState
    version: int = CHECKPOINT_VERSION

    @staticmethod
    def fresh(config: NetConfig, seed: int = 0) -> "Checkpoint":
        params = init_params(config, seed=seed)
        return Checkpoint(config=config, params=params, opt=AdamState.zeros_like(params))


def _write_blob(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(f):
    raw = f.read(4)
    if len(raw) < 4:
        raise FormatError("checkpoint truncated while reading blob header")
    (nlen,) = struct.unpack("<I", raw)
    name = f.read(nlen).decode()
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise FormatError(f"checkpoint truncated in blob {name!r}")
    return name, np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, version, length-prefixed JSON metadata, then named
    float32 little-endian parameter and moment blobs in declared order."""
    meta = {
        "config": {
            "in_channels": ckpt.config.in_channels,
            "levels": list(ckpt.config.levels),
            "bottleneck_channels": ckpt.config.bottleneck_channels,
            "out_channels": ckpt.config.out_channels,
        },
        "step": ckpt.opt.t,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for name, _shape in param_spec(ckpt.config):
            _write_blob(f, name, ckpt.params[name])
        for kind, table in (("m", ckpt.opt.m), ("v", ckpt.opt.v)):
            for name, _shape in param_spec(ckpt.config):
                _write_blob(f, f"adam_{kind}/{name}", table[name])


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; blob shapes must match the
    architecture derived from the embedded config."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", f.read(4))
        try:
            meta = json.loads(f.read(mlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"bad checkpoint metadata: {e}") from e
        cfg = meta["config"]
        config = NetConfig(
            in_channels=cfg["in_channels"],
            levels=tuple(cfg["levels"]),
            bottleneck_channels=cfg["bottleneck_channels"],
            out_channels=cfg["out_channels"],
        )
        expected = param_spec(config)
        params = {}
        for exp_name, exp_shape in expected:
            name, arr = _read_blob(f)
            if name != exp_name:
                raise FormatError(f"unexpected blob {name!r}, wanted {exp_name!r}")
            if arr.shape != exp_shape:
                raise FormatError(
                    f"layer {name!r}: stored shape {arr.shape} does not match "
                    f"config-derived shape {exp_shape}")
            params[name] = arr
        moments = {"m": {}, "v": {}}
        for kind in ("m", "v"):
            for exp_name, exp_shape in expected:
                name, arr = _read_blob(f)
                want = f"adam_{kind}/{exp_name}"
                if name != want:
                    raise FormatError(f"unexpected blob {name!r}, wanted {want!r}")
                if arr.shape != exp_shape:
                    raise FormatError(
                        f"layer {name!r}: stored shape {arr.shape} does not match "
                        f"config-derived shape {exp_shape}")
                moments[kind][exp_name] = arr
    opt = AdamState(m=moments["m"], v=moments["v"], t=int(meta["step"]))
    return Checkpoint(config=config, params=params, opt=opt, version=version)
