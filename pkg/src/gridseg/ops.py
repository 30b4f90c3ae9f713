"""Differentiable operations on 4-D tensors.

Convolutions are lowered to a single matrix product over patches
extracted with zero-copy striding. The reduction order inside that
product is fixed at (channel, kernel row, kernel col), so forward
results are bit-deterministic for identical inputs on the same machine.

The transposed convolution is implemented literally as the adjoint of
the matching strided convolution: zero-insert by the stride, pad, and
correlate with the spatially flipped, channel-swapped kernel. The same
primitive therefore serves both the upsampling forward pass and the
input-gradient of every convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tape, Tensor

# ---------------------------------------------------------------------------
# correlation primitives
# ---------------------------------------------------------------------------


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """(n, c, h, w) -> (n, c*kh*kw, oh*ow) patch matrix, plus (oh, ow)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sr, scl = x.strides
    view = as_strided(
        x,
        (n, c, kh, kw, oh, ow),
        (sn, sc, sr, scl, sr * stride, scl * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow), oh, ow


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, padding) -> np.ndarray:
    """Cross-correlate x (n,ci,h,w) with w (co,ci,kh,kw) -> (n,co,oh,ow)."""
    co, ci, kh, kw = w.shape
    xp = _pad2d(x, padding[0], padding[1])
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols)
    return out.reshape(x.shape[0], co, oh, ow)


def _corr2d_weight_grad(x, g, stride, padding, kh, kw) -> np.ndarray:
    """Contraction of input x (n,ci,..) with output grad g (n,co,oh,ow)."""
    xp = _pad2d(x, padding[0], padding[1])
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    n, co = g.shape[0], g.shape[1]
    gm = g.reshape(n, co, oh * ow)
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, x.shape[1], kh, kw)


def _adjoint_corr2d(x, w, stride, padding, out_hw) -> np.ndarray:
    """Adjoint of `_corr2d` in its input argument.

    Maps x (n,co,h,w) back to (n,ci,*out_hw): zero-insert x on the stride
    grid, pad so the result lands exactly on out_hw, and correlate with
    the rotated kernel at stride 1. The trailing pads absorb both the
    usual padding offset and any output-padding implied by out_hw.
    """
    n, co, h, w_in = x.shape
    _, ci, kh, kw = w.shape
    oh, ow = out_hw
    dil_h = (h - 1) * stride + 1
    dil_w = (w_in - 1) * stride + 1
    pl_h = kh - 1 - padding[0]
    pl_w = kw - 1 - padding[1]
    pr_h = oh + kh - 1 - pl_h - dil_h
    pr_w = ow + kw - 1 - pl_w - dil_w
    if min(pl_h, pl_w, pr_h, pr_w) < 0:
        raise ValueError(
            f"target {tuple(out_hw)} not reachable from input {(h, w_in)} "
            f"with kernel {(kh, kw)}, stride {stride}, padding {tuple(padding)}"
        )
    buf = np.zeros((n, co, pl_h + dil_h + pr_h, pl_w + dil_w + pr_w), dtype=x.dtype)
    buf[:, :, pl_h : pl_h + dil_h : stride, pl_w : pl_w + dil_w : stride] = x
    wrot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _corr2d(buf, wrot, 1, (0, 0))


# ---------------------------------------------------------------------------
# convolution ops
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weight/bias pair plus geometry for one convolution.

    ``weight`` is always stored in forward-convolution orientation
    (out_c, in_c, kh, kw). For :func:`deconv2d_up`, which applies the
    adjoint map, the tensor flows out_c -> in_c and ``bias`` holds in_c
    entries; for :func:`conv2d` / :func:`conv2d_down` it holds out_c.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: tuple[int, int] = (0, 0)


def conv_params(rng, out_c, in_c, kh, kw, stride=1, padding=(0, 0),
                dtype=np.float32, bias_len=None) -> ConvParams:
    """Fan-in-scaled normal weights and zero bias."""
    std = np.sqrt(2.0 / (in_c * kh * kw))
    w = rng.normal(0.0, std, (out_c, in_c, kh, kw)).astype(dtype)
    b = np.zeros(out_c if bias_len is None else bias_len, dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      stride=stride, padding=padding)


def conv2d(x: Tensor, params: ConvParams, tape: Tape | None = None) -> Tensor:
    """Strided 2-D convolution (cross-correlation) with bias."""
    w, b = params.weight, params.bias
    co, ci, kh, kw = w.shape
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if x.shape[1] != ci:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    stride, pad = params.stride, params.padding
    y = _corr2d(x.data, w.data, stride, pad)
    if y.shape[2] < 1 or y.shape[3] < 1:
        raise ValueError(f"conv2d output collapsed to {y.shape} from input {x.shape}")
    y += b.data.reshape(1, -1, 1, 1)
    out = Tensor(y, requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:
        in_hw = x.shape[2:]

        def _bwd():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accumulate_grad(_adjoint_corr2d(g, w.data, stride, pad, in_hw))
            if w.requires_grad:
                w.accumulate_grad(_corr2d_weight_grad(x.data, g, stride, pad, kh, kw))
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))

        tape.record(_bwd)
    return out


def conv2d_down(x: Tensor, params: ConvParams, tape: Tape | None = None) -> Tensor:
    """Resolution-halving convolution: stride 2, output ceil(in/2) per axis."""
    if params.stride != 2:
        raise ValueError(f"conv2d_down requires stride 2, got {params.stride}")
    return conv2d(x, params, tape)


def deconv2d_up(x: Tensor, params: ConvParams, target_hw, tape: Tape | None = None) -> Tensor:
    """Transposed convolution, the exact adjoint of the matching stride-2 conv.

    The caller prescribes the output size; the implied output-padding must
    fall in {0, 1} per axis or the target is rejected.
    """
    w, b = params.weight, params.bias
    co, ci, kh, kw = w.shape
    if params.stride != 2:
        raise ValueError(f"deconv2d_up requires stride 2, got {params.stride}")
    if x.data.ndim != 4 or x.shape[1] != co:
        raise ValueError(
            f"deconv2d_up channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    stride, pad = params.stride, params.padding
    th, tw = int(target_hw[0]), int(target_hw[1])
    for t, s, k, p, ax in ((th, x.shape[2], kh, pad[0], "h"), (tw, x.shape[3], kw, pad[1], "w")):
        opad = t - ((s - 1) * stride - 2 * p + k)
        if opad not in (0, 1):
            raise ValueError(
                f"deconv2d_up target {(th, tw)} unreachable from {x.shape[2:]} "
                f"along {ax} (implied output padding {opad})"
            )
    y = _adjoint_corr2d(x.data, w.data, stride, pad, (th, tw))
    y += b.data.reshape(1, -1, 1, 1)
    out = Tensor(y, requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:

        def _bwd():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accumulate_grad(_corr2d(g, w.data, stride, pad))
            if w.requires_grad:
                w.accumulate_grad(_corr2d_weight_grad(g, x.data, stride, pad, kh, kw))
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))

        tape.record(_bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNorm:
    """Per-channel affine normalization with running statistics.

    Training mode normalizes by biased batch moments and folds them into
    the running estimates; eval mode applies the running estimates as
    constants. gamma/beta are trainable, the running stats are buffers.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def channels(self) -> int:
        return self.gamma.size


def batch_norm(x: Tensor, bn: BatchNorm, training: bool, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != bn.channels:
        raise ValueError(
            f"batch_norm channel mismatch: input {x.shape} vs {bn.channels} channels"
        )
    gamma, beta = bn.gamma, bn.beta
    n, c, h, w = x.shape
    m = n * h * w
    if training:
        if m == 1:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = bn.momentum
        bn.running_mean += mom * (mean - bn.running_mean)
        bn.running_var += mom * (var - bn.running_var)
    else:
        mean = bn.running_mean
        var = bn.running_var
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y, requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)
    if tape is not None and out.requires_grad:

        def _bwd():
            g = out.grad
            if g is None:
                return
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gw = gamma.data.reshape(1, c, 1, 1)
                if training:
                    # standard batch-norm input gradient with batch moments
                    gsum = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gxhat = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    dx = (gw * inv.reshape(1, c, 1, 1) / m) * (m * g - gsum - xhat * gxhat)
                else:
                    dx = g * gw * inv.reshape(1, c, 1, 1)
                x.accumulate_grad(dx)

        tape.record(_bwd)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad)
    if tape is not None and out.requires_grad:
        mask = x.data > 0  # gradient at exactly 0 is 0

        def _bwd():
            g = out.grad
            if g is None:
                return
            x.accumulate_grad(g * mask)

        tape.record(_bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    if tape is not None and out.requires_grad:

        def _bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        tape.record(_bwd)
    return out


def concat_channels(xs: list[Tensor], tape: Tape | None = None) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels layout mismatch: {ref} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1),
                 requires_grad=any(t.requires_grad for t in xs))
    if tape is not None and out.requires_grad:
        splits = np.cumsum([t.shape[1] for t in xs])[:-1]

        def _bwd():
            g = out.grad
            if g is None:
                return
            for t, piece in zip(xs, np.split(g, splits, axis=1)):
                if t.requires_grad:
                    t.accumulate_grad(piece)

        tape.record(_bwd)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = 255,
                          tape: Tape | None = None) -> Tensor:
    """Mean pixel cross-entropy over non-ignored positions.

    labels: integer (n, h, w); positions equal to ignore_label contribute
    neither to the mean nor to the gradient.
    """
    z = logits.data
    if z.ndim != 4:
        raise ValueError(f"softmax_cross_entropy expects 4-D logits, got {z.shape}")
    n, c, h, w = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"label shape {labels.shape} does not match logits {z.shape}")
    valid = labels != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every label is ignored")
    picked_labels = labels[valid]
    if picked_labels.min() < 0 or picked_labels.max() >= c:
        raise ValueError(f"labels outside [0, {c}) and not ignore_label={ignore_label}")

    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    lse = np.log(se)[:, 0] + zmax[:, 0]
    idx = np.where(valid, labels, 0)[:, None]
    picked = np.take_along_axis(z, idx, axis=1)[:, 0]
    loss = ((lse - picked) * valid).sum() / count
    out = Tensor(np.asarray(loss, dtype=z.dtype))
    out.requires_grad = logits.requires_grad
    if tape is not None and out.requires_grad:

        def _bwd():
            g = out.grad
            if g is None:
                return
            soft = ez / se
            scale = valid / count
            dz = soft * scale[:, None]
            onehot = np.take_along_axis(dz, idx, axis=1)
            np.put_along_axis(dz, idx, onehot - scale[:, None], axis=1)
            logits.accumulate_grad(dz * g)

        tape.record(_bwd)
    return out
