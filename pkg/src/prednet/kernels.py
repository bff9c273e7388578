"""Differentiable structured kernels: convolutions, pooling, ConvLSTM, softmax.

All spatial kernels take ``[N, C, H, W]`` tensors; a ``[C, H, W]`` tensor is
treated as a batch of one and returned without the batch axis.  Convolution
is cross-correlation (no kernel flip) lowered to one matrix product per call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from .autograd import Tensor, make_node
from .errors import DimensionError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise DimensionError("kernel must be a positive odd size")
        if self.stride not in (1, 2):
            raise DimensionError("only stride 1 or 2 is supported")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def transpose_weight_shape(self) -> tuple[int, int, int, int]:
        return (self.in_channels, self.out_channels, self.kernel, self.kernel)

    def init_weight(self, rng: np.random.Generator, transpose: bool = False) -> np.ndarray:
        """Glorot-uniform weights, bound sqrt(6 / (fan_in + fan_out))."""
        area = self.kernel * self.kernel
        bound = np.sqrt(6.0 / ((self.in_channels + self.out_channels) * area))
        shape = self.transpose_weight_shape if transpose else self.weight_shape
        return rng.uniform(-bound, bound, size=shape)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- raw helpers


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def _to_rows(y: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N*H*W, C]."""
    return y.transpose(0, 2, 3, 1).reshape(-1, y.shape[1])


def _from_rows(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2)


def _batched(fn):
    """Lift a 4-D kernel so it also accepts an unbatched [C, H, W] input."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(ag.reshape(x, (1,) + x.shape), *args, **kwargs)
            return ag.reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- kernels


def _shift_conv_forward(x: np.ndarray, weight: np.ndarray):
    """Stride-1 "same" cross-correlation via shifted contiguous slices.

    The padded input is flattened per (channel, sample) so that every kernel
    offset is a contiguous window; outputs are computed on the padded-width
    grid and the surplus columns cropped.
    """
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    span = h * wp
    xp = np.zeros((c, n, hp + 1, wp), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
    flat = xp.reshape(c, n, -1)
    cols = np.empty((k * k, c, n, span), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[i * k + j] = flat[:, :, off : off + span]
    cols = cols.reshape(k * k * c, n * span)
    wmat = weight.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, h, wp)[:, :, :, :w].transpose(1, 0, 2, 3)
    return out, (cols, wmat)


def _shift_conv_backward(g: np.ndarray, ctx, x_shape, k: int, need_x: bool, need_w: bool):
    cols, wmat = ctx
    n, c, h, w = x_shape
    o = g.shape[1]
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    span = h * wp
    gp = np.zeros((o, n, h, wp), dtype=g.dtype)
    gp[:, :, :, :w] = g.transpose(1, 0, 2, 3)
    gf = gp.reshape(o, n * span)
    gw = gx = None
    if need_w:
        gw = (gf @ cols.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    if need_x:
        dcols = (wmat.T @ gf).reshape(k * k, c, n, span)
        dflat = np.zeros((c, n, (hp + 1) * wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                dflat[:, :, off : off + span] += dcols[i * k + j]
        gx = dflat.reshape(c, n, hp + 1, wp)[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3)
    return gx, gw


@_batched
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding.

    ``weight`` is ``[C_out, C_in, k, k]``; with stride 2 the output extents
    are halved (rounded up).
    """
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c != c_in or k != k2:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {c_in} (kernel {k}x{k2})")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    pad = k // 2
    x_shape = x.shape
    if stride == 1:
        out, ctx = _shift_conv_forward(x.data, weight.data)
    else:
        cols, ho, wo = _im2col(x.data, k, stride, pad)
        wmat = weight.data.reshape(c_out, -1)
        out = _from_rows(cols @ wmat.T, n, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def _bwd(g):
        if stride == 1:
            gx, gw = _shift_conv_backward(g, ctx, x_shape, k, x.requires_grad, weight.requires_grad)
        else:
            grows = _to_rows(g)
            gx = _col2im(grows @ wmat, x_shape, k, stride, pad, ho, wo) if x.requires_grad else None
            gw = (grows.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3), dtype=np.float64)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, _bwd, "conv2d")


@_batched
def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution: zero-insertion scatter followed by "same" kernel.

    ``weight`` is ``[C_in, C_out, k, k]``.  This is the exact adjoint of
    ``conv2d(., weight, stride=stride)`` mapping ``C_out`` to ``C_in``
    channels; output extents are ``stride`` times the input's.
    """
    n, c, h, w = x.shape
    c_in, c_out, k, k2 = weight.shape
    if c != c_in or k != k2:
        raise DimensionError(f"conv2d_transpose: input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} != ({c_out},)")
    pad = k // 2
    out_shape = (n, c_out, h * stride, w * stride)
    wmat = weight.data.reshape(c_in, -1)
    xrows = _to_rows(x.data)
    out = _col2im(xrows @ wmat, out_shape, k, stride, pad, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def _bwd(g):
        gcols, _, _ = _im2col(g, k, stride, pad)
        gx = _from_rows(gcols @ wmat.T, n, h, w) if x.requires_grad else None
        gw = (xrows.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3), dtype=np.float64)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, _bwd, "conv2d_transpose")


@_batched
def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first
    element of the window in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def _bwd(g):
        z = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(z, idx, g[..., None], axis=-1)
        return (z.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_node(out, (x,), _bwd, "maxpool2")


@_batched
def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_node(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    return ag.mean(x, axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape [N, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot map {x.shape} with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape}")
        out = out + bias.data

    def _bwd(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads + (g.sum(axis=0, dtype=np.float64),) if bias is not None else grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, _bwd, "linear")


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    y = _softmax_np(logits.data, axis)

    def _bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (logits,), _bwd, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def _bwd(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (logits,), _bwd, "log_softmax")


# ---------------------------------------------------------------- ConvLSTM

GATES = ("i", "f", "o", "c")


@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, shape) -> "ConvLSTMState":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def init_convlstm(
    rng: np.random.Generator, in_channels: int, hidden: int, kernel: int = 3, extra_channels: int = 0
) -> dict[str, np.ndarray]:
    """Per-gate weight arrays for :func:`convlstm_step`.

    Gate weights act on ``concat[x, hidden]``.  Biases start at zero except
    the forget gate, which starts at one.  ``extra_channels`` adds bias-free
    weights ``Wx_*`` for an optional second input group.
    """
    spec = ConvSpec(in_channels + hidden, hidden, kernel)
    params: dict[str, np.ndarray] = {}
    for gate in GATES:
        params[f"W_{gate}"] = spec.init_weight(rng)
    for gate in GATES:
        params[f"b_{gate}"] = np.full(hidden, 1.0 if gate == "f" else 0.0)
    if extra_channels:
        xspec = ConvSpec(extra_channels, hidden, kernel)
        for gate in GATES:
            params[f"Wx_{gate}"] = xspec.init_weight(rng)
    return params


def convlstm_step(
    x: Tensor, state: ConvLSTMState, weights: dict[str, Tensor], extra: Tensor | None = None
) -> tuple[Tensor, ConvLSTMState]:
    """One ConvLSTM update.

    Gates i, f, o are sigmoids and the candidate a tanh of a convolution over
    ``concat[x, hidden]`` (plus a convolution of ``extra`` when given);
    ``cell' = f*cell + i*candidate`` and ``h = o*tanh(cell')``.
    """
    h_prev, c_prev = state.hidden, state.cell
    if h_prev.shape != c_prev.shape:
        raise DimensionError("hidden and cell shapes differ")
    same_batch = x.ndim == 3 or x.shape[0] == h_prev.shape[0]
    if x.ndim != h_prev.ndim or x.ndim not in (3, 4) or not same_batch or x.shape[-2:] != h_prev.shape[-2:]:
        raise DimensionError(f"convlstm_step: input {x.shape} does not match state {h_prev.shape}")
    ch = 0 if x.ndim == 3 else 1
    hid = h_prev.shape[ch]
    w = ag.concat([weights[f"W_{g}"] for g in GATES], axis=0)
    b = ag.concat([weights[f"b_{g}"] for g in GATES], axis=0)
    gates = conv2d(ag.concat([x, h_prev], axis=ch), w, b)
    if extra is not None:
        wx = ag.concat([weights[f"Wx_{g}"] for g in GATES], axis=0)
        gates = gates + conv2d(extra, wx)
    sig = ag.sigmoid(ag.slice_axis(gates, 0, 3 * hid, axis=ch))
    i = ag.slice_axis(sig, 0, hid, axis=ch)
    f = ag.slice_axis(sig, hid, 2 * hid, axis=ch)
    o = ag.slice_axis(sig, 2 * hid, 3 * hid, axis=ch)
    cand = ag.tanh(ag.slice_axis(gates, 3 * hid, 4 * hid, axis=ch))
    cell = f * c_prev + i * cand
    h = o * ag.tanh(cell)
    return h, ConvLSTMState(h, cell)
