"""Small recurrent one-shot segmentation network with hand-written BPTT.

Frame -> two conv/ReLU/max-pool blocks (1/4 resolution) -> per-object
ConvLSTM cell fed with [features, previous mask, hidden state] -> 1x1 conv
-> logits, upsampled x4 (nearest) -> sigmoid.

All arrays are float64 and laid out (batch, channels, rows, cols). Within a
clip the objects form the batch; they share the encoder features of each
frame but keep independent recurrent states.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = "CVOSCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    enc1_w: np.ndarray  # (C, 1, 3, 3)
    enc1_b: np.ndarray  # (C,)
    enc2_w: np.ndarray  # (C, C, 3, 3)
    enc2_b: np.ndarray  # (C,)
    cell_w: np.ndarray  # (4*Ch, C+1+Ch, 3, 3); gate blocks i, f, o, g
    cell_b: np.ndarray  # (4*Ch,)
    dec_w: np.ndarray  # (1, Ch)
    dec_b: np.ndarray  # (1,)

    @property
    def channels(self) -> int:
        return self.enc1_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.dec_w.shape[1]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> ModelParams:
        return cls(**{f.name: np.asarray(tensors[f.name], dtype=np.float64) for f in fields(cls)})

    def zeros_like(self) -> ModelParams:
        return ModelParams.from_dict({k: np.zeros_like(v) for k, v in self.to_dict().items()})

    def copy(self) -> ModelParams:
        return ModelParams.from_dict({k: v.copy() for k, v in self.to_dict().items()})

    def check_shapes(self) -> None:
        C, Ch = self.channels, self.hidden
        expected = {
            "enc1_w": (C, 1, 3, 3), "enc1_b": (C,),
            "enc2_w": (C, C, 3, 3), "enc2_b": (C,),
            "cell_w": (4 * Ch, C + 1 + Ch, 3, 3), "cell_b": (4 * Ch,),
            "dec_w": (1, Ch), "dec_b": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def init_params(
    channels: int = 8, hidden: int = 8, seed: int | np.random.Generator = 0, output_bias: float = 0.0
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias +1.

    ``output_bias`` sets the decoder bias, e.g. to the log-odds of the
    foreground rate. Left at 0 with sparse masks, Adam saturates the cell
    into a constant "background" output long before the mask path is used.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C, Ch = channels, hidden

    def uniform(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    cell_b = np.zeros(4 * Ch)
    cell_b[Ch:2 * Ch] = 1.0
    return ModelParams(
        enc1_w=uniform((C, 1, 3, 3), 9), enc1_b=np.zeros(C),
        enc2_w=uniform((C, C, 3, 3), 9 * C), enc2_b=np.zeros(C),
        cell_w=uniform((4 * Ch, C + 1 + Ch, 3, 3), 9 * (C + 1 + Ch)), cell_b=cell_b,
        dec_w=uniform((1, Ch), Ch), dec_b=np.full(1, float(output_bias)),
    )


# ---------------------------------------------------------------- primitives

def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*W) patches of the zero-padded input."""
    N, C, H, W = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, N, H, W))
    for di in range(3):
        for dj in range(3):
            cols[:, di, dj] = xp[:, :, di:di + H, dj:dj + W]
    return cols.reshape(C * 9, N * H * W)


def conv3x3(x, w, b):
    """Same-padded 3x3 convolution (cross-correlation). Returns output and im2col cache."""
    N, _, H, W = x.shape
    cols = _im2col(x)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], N, H, W).transpose(1, 0, 2, 3), cols


def conv3x3_backward(dout, cols, w):
    N, Cout, H, W = dout.shape
    Cin = w.shape[1]
    d = dout.transpose(1, 0, 2, 3).reshape(Cout, N * H * W)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    dcols = (w.reshape(Cout, -1).T @ d).reshape(Cin, 3, 3, N, H, W)
    dxp = np.zeros((Cin, N, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + H, dj:dj + W] += dcols[:, di, dj]
    return dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3), dw, db


def maxpool2(x):
    """2x2 max-pool; ``idx`` records the first maximal position (row-major) of each window."""
    q = (x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3)))
    return out, idx


def maxpool2_backward(dout, idx):
    N, C, h, w = dout.shape
    dx = np.zeros((N, C, 2 * h, 2 * w))
    dx[..., 0::2, 0::2] = np.where(idx == 0, dout, 0.0)
    dx[..., 0::2, 1::2] = np.where(idx == 1, dout, 0.0)
    dx[..., 1::2, 0::2] = np.where(idx == 2, dout, 0.0)
    dx[..., 1::2, 1::2] = np.where(idx == 3, dout, 0.0)
    return dx


def downsample4(masks: np.ndarray) -> np.ndarray:
    """(N, H, W) masks -> (N, 1, H/4, W/4) by 4x4 block averaging."""
    N, H, W = masks.shape
    return masks.reshape(N, H // 4, 4, W // 4, 4).mean(axis=(2, 4))[:, None]


def upsample4(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 4, axis=-2), 4, axis=-1)


def _check_frame_shape(H: int, W: int) -> None:
    if H % 4 or W % 4 or H == 0 or W == 0:
        raise ValueError(f"frame size {H}x{W} must be a positive multiple of 4")


# ------------------------------------------------------------------- encoder

def _encode(frames: np.ndarray, p: ModelParams):
    x = frames[:, None]
    a1, cols1 = conv3x3(x, p.enc1_w, p.enc1_b)
    r1 = np.maximum(a1, 0.0)
    m1, idx1 = maxpool2(r1)
    a2, cols2 = conv3x3(m1, p.enc2_w, p.enc2_b)
    r2 = np.maximum(a2, 0.0)
    feats, idx2 = maxpool2(r2)
    return feats, (cols1, a1, idx1, cols2, a2, idx2)


def _encode_backward(dfeats, cache, p: ModelParams, g: ModelParams):
    cols1, a1, idx1, cols2, a2, idx2 = cache
    dr2 = maxpool2_backward(dfeats, idx2)
    da2 = dr2 * (a2 > 0)
    dm1, dw2, db2 = conv3x3_backward(da2, cols2, p.enc2_w)
    g.enc2_w += dw2
    g.enc2_b += db2
    dr1 = maxpool2_backward(dm1, idx1)
    da1 = dr1 * (a1 > 0)
    _, dw1, db1 = conv3x3_backward(da1, cols1, p.enc1_w)
    g.enc1_w += dw1
    g.enc1_b += db1


def encode(frames: np.ndarray, params: ModelParams) -> np.ndarray:
    """Features at 1/4 resolution: (H, W) -> (C, H/4, W/4), or (T, H, W) -> (T, C, H/4, W/4)."""
    frames = np.asarray(frames, dtype=np.float64)
    single = frames.ndim == 2
    if single:
        frames = frames[None]
    if frames.ndim != 3:
        raise ValueError(f"expected (H, W) or (T, H, W) frames, got shape {frames.shape}")
    _check_frame_shape(*frames.shape[1:])
    feats, _ = _encode(frames, params)
    return feats[0] if single else feats


# ---------------------------------------------------------------- recurrence

@dataclass
class RecurrentState:
    h: np.ndarray  # (N, Ch, H/4, W/4)
    c: np.ndarray

    @classmethod
    def zeros(cls, n: int, hidden: int, h: int, w: int) -> RecurrentState:
        return cls(np.zeros((n, hidden, h, w)), np.zeros((n, hidden, h, w)))


def _cell(feats, mask_in, state: RecurrentState, p: ModelParams):
    N = mask_in.shape[0]
    Ch = p.hidden
    inp = np.concatenate([np.broadcast_to(feats, (N,) + feats.shape[1:]), mask_in, state.h], axis=1)
    z, cols = conv3x3(inp, p.cell_w, p.cell_b)
    i = sigmoid(z[:, :Ch])
    f = sigmoid(z[:, Ch:2 * Ch])
    o = sigmoid(z[:, 2 * Ch:3 * Ch])
    g = np.tanh(z[:, 3 * Ch:])
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    logits = np.tensordot(p.dec_w[0], h, axes=([0], [1])) + p.dec_b[0]
    return RecurrentState(h, c), logits, (cols, i, f, o, g, tc, state.c, h)


def _cell_backward(dlogits, dh_next, dc_next, cache, p: ModelParams, g: ModelParams):
    cols, i, f, o, gg, tc, c_prev, h = cache
    C = p.channels
    g.dec_w[0] += np.tensordot(dlogits, h, axes=([0, 1, 2], [0, 2, 3]))
    g.dec_b[0] += dlogits.sum()
    dh = p.dec_w[0][None, :, None, None] * dlogits[:, None] + dh_next
    do = dh * tc
    dc = dh * o * (1.0 - tc * tc) + dc_next
    dz = np.concatenate([
        dc * gg * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        do * o * (1.0 - o),
        dc * i * (1.0 - gg * gg),
    ], axis=1)
    dinp, dw, db = conv3x3_backward(dz, cols, p.cell_w)
    g.cell_w += dw
    g.cell_b += db
    # dinp[:, C] is the fed-back mask: detached, no gradient.
    return dinp[:, :C], dinp[:, C + 1:], dc * f


def step(features, prev_mask_input, state: RecurrentState, params: ModelParams):
    """One recurrent step for N objects.

    features: (C, h, w) or (1, C, h, w); prev_mask_input: (N, h, w) or
    (N, 1, h, w) at 1/4 resolution. Returns the new state and (N, 4h, 4w)
    mask probabilities.
    """
    feats = features[None] if features.ndim == 3 else features
    mask_in = prev_mask_input[:, None] if prev_mask_input.ndim == 3 else prev_mask_input
    if feats.shape[1] != params.channels:
        raise ValueError(f"features have {feats.shape[1]} channels, expected {params.channels}")
    if mask_in.shape[-2:] != feats.shape[-2:] or state.h.shape[-2:] != feats.shape[-2:]:
        raise ValueError("feature, mask and state resolutions differ")
    if state.h.shape[:2] != (mask_in.shape[0], params.hidden):
        raise ValueError(f"state shape {state.h.shape} does not fit {mask_in.shape[0]} objects")
    new_state, logits, _ = _cell(feats, mask_in, state, params)
    return new_state, upsample4(sigmoid(logits))


# ---------------------------------------------------------------- clip level

@dataclass
class ClipForward:
    loss: float
    probs: list[np.ndarray]  # per clip: (L-1, N, H, W) predictions for frames 1..L-1
    fed_gt: list[list[bool]]  # per clip, per step t=1..L-1: whether the mask input was ground truth
    feedback: list[np.ndarray]  # per step t=1..L-1: the (N_total, 1, h, w) mask inputs used
    _cache: tuple = ()


def forward_batch(
    params: ModelParams,
    clips: Sequence[tuple[np.ndarray, np.ndarray, Sequence[bool]]],
    fixed_feedback: Sequence[np.ndarray] | None = None,
) -> ClipForward:
    """Run training clips ``(frames, masks, draws)`` with scheduled-sampling feedback.

    frames: (L, H, W); masks: (L, N, H, W) ground truth. Step t = 1 is fed
    the frame-0 mask; step t >= 2 is fed the ground-truth mask of frame t-1
    when ``draws[t-2]`` is true, else the model's own (detached) prediction.
    A clip's loss is the mean binary cross-entropy over its objects, steps
    and pixels; the batch loss is the mean over clips.

    ``fixed_feedback`` replaces the fed-back predictions with given inputs,
    indexed like ``ClipForward.feedback``; the gradient check uses it to hold
    the detached inputs constant.
    """
    if not clips:
        raise ValueError("empty batch")
    frames = [np.asarray(c[0], dtype=np.float64) for c in clips]
    masks = [np.asarray(c[1], dtype=np.float64) for c in clips]
    L, H, W = frames[0].shape
    if L < 2:
        raise ValueError("a clip needs at least 2 frames")
    _check_frame_shape(H, W)
    for f, m, (_, _, draws) in zip(frames, masks, clips):
        if f.shape != (L, H, W):
            raise ValueError(f"clip frames {f.shape} differ from {(L, H, W)}")
        if m.ndim != 4 or m.shape[0] != L or m.shape[2:] != (H, W):
            raise ValueError(f"masks shape {m.shape} does not match frames {f.shape}")
        if m.shape[1] == 0 or not all(m[0, n].any() for n in range(m.shape[1])):
            raise ValueError("every object needs a non-empty first-frame mask")
        if len(draws) < L - 2:
            raise ValueError(f"need {L - 2} draws for a clip of {L} frames, got {len(draws)}")

    B = len(clips)
    counts = [m.shape[1] for m in masks]
    obj_clip = np.repeat(np.arange(B), counts)
    use_gt = np.array([[bool(d) for d in c[2][:L - 2]] for c in clips], dtype=bool).reshape(B, L - 2)
    weight = np.repeat([1.0 / (B * n * (L - 1) * H * W) for n in counts], counts)[:, None, None]

    feats, enc_cache = _encode(np.concatenate([f[1:] for f in frames]), params)
    all_masks = np.concatenate(masks, axis=1)
    N = all_masks.shape[1]
    h4, w4 = H // 4, W // 4
    # Block sums of the targets: the loss over an upsampled block is 16*softplus(z) - z*sum(y).
    target_sums = all_masks[1:].reshape(L - 1, N, h4, 4, w4, 4).sum(axis=(3, 5))
    state = RecurrentState.zeros(N, params.hidden, h4, w4)
    mask_in = downsample4(all_masks[0])
    loss = 0.0
    probs_low, caches, feedback = [], [], []
    for t in range(1, L):
        if t >= 2:
            rows_gt = use_gt[obj_clip, t - 2][:, None, None, None]
            if fixed_feedback is not None:
                pred_in = np.asarray(fixed_feedback[t - 1], dtype=np.float64)
            else:
                pred_in = probs_low[-1][:, None]
            mask_in = np.where(rows_gt, downsample4(all_masks[t - 1]), pred_in)
        feedback.append(mask_in)
        rows = obj_clip * (L - 1) + (t - 1)
        state, logits, cache = _cell(feats[rows], mask_in, state, params)
        caches.append((cache, logits, rows))
        loss += float(np.sum(weight * (16.0 * np.logaddexp(0.0, logits) - logits * target_sums[t - 1])))
        probs_low.append(sigmoid(logits))
    probs = upsample4(np.stack(probs_low))
    splits = np.cumsum(counts)[:-1]
    fed_gt = [[True] + use_gt[b].tolist() for b in range(B)]
    return ClipForward(loss, np.split(probs, splits, axis=1), fed_gt, feedback,
                       (feats, enc_cache, caches, target_sums, weight))


def forward_clip(
    params: ModelParams,
    frames: np.ndarray,
    masks: np.ndarray,
    draws: Sequence[bool] = (),
    fixed_feedback: Sequence[np.ndarray] | None = None,
) -> ClipForward:
    """Single-clip ``forward_batch``."""
    return forward_batch(params, [(frames, masks, draws)], fixed_feedback)


def backward(params: ModelParams, fwd: ClipForward) -> ModelParams:
    """Exact gradient of ``fwd.loss`` with respect to every parameter."""
    feats, enc_cache, caches, target_sums, weight = fwd._cache
    grads = params.zeros_like()
    dfeats = np.zeros_like(feats)
    dh = np.zeros_like(caches[-1][0][7])
    dc = np.zeros_like(dh)
    for t in range(len(caches), 0, -1):
        cache, logits, rows = caches[t - 1]
        dlogits = weight * (16.0 * sigmoid(logits) - target_sums[t - 1])
        df, dh, dc = _cell_backward(dlogits, dh, dc, cache, params, grads)
        np.add.at(dfeats, rows, df)
    _encode_backward(dfeats, enc_cache, params, grads)
    return grads


def loss_and_grad(params, frames, masks, draws=()):
    fwd = forward_clip(params, frames, masks, draws)
    return fwd.loss, backward(params, fwd)


def batch_loss_and_grad(params, clips):
    fwd = forward_batch(params, clips)
    return fwd.loss, backward(params, fwd)


def predict_sequence(params: ModelParams, frames: np.ndarray, first_masks: np.ndarray) -> np.ndarray:
    """One-shot inference: probabilities (T-1, N, H, W) for frames 1..T-1.

    The frame-0 masks seed the recurrence; every later step is fed the
    model's own previous prediction.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T, H, W = frames.shape
    _check_frame_shape(H, W)
    first = np.asarray(first_masks, dtype=np.float64)
    if first.shape[1:] != (H, W):
        raise ValueError(f"first-frame masks {first.shape[1:]} do not match frames {H}x{W}")
    N = first.shape[0]
    out = np.empty((max(T - 1, 0), N, H, W))
    if T < 2 or N == 0:
        return out
    feats = encode(frames[1:], params)
    state = RecurrentState.zeros(N, params.hidden, H // 4, W // 4)
    mask_in = downsample4(first)
    for t in range(1, T):
        state, logits, _ = _cell(feats[t - 1:t], mask_in, state, params)
        p = sigmoid(logits)
        out[t - 1] = upsample4(p)
        mask_in = p[:, None]
    return out


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    tensors = params.to_dict()
    lines = [CHECKPOINT_MAGIC, f"version {CHECKPOINT_VERSION}", f"tensors {len(tensors)}"]
    lines += [f"{name} " + " ".join(str(d) for d in arr.shape) for name, arr in tensors.items()]
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC.encode("ascii") + b"\n"):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    head_end = data.find(b"\nend\n")
    if head_end < 0:
        raise ValueError(f"{path}: truncated header")
    header = data[:head_end].decode("ascii").split("\n")
    pos = head_end + len(b"\nend\n")
    if header[1] != f"version {CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: unsupported {header[1]}")
    if header[2] != f"tensors {len(header) - 3}":
        raise ValueError(f"{path}: tensor table does not match {header[2]!r}")
    tensors = {}
    for line in header[3:]:
        name, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: truncated data for {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    try:
        params = ModelParams.from_dict(tensors)
    except KeyError as exc:
        raise ValueError(f"{path}: missing tensor {exc}") from None
    params.check_shapes()
    return params
