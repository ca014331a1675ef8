"""Convolution, downsampling, and upsampling layers for stream construction.

Feature maps are channels-last: [H, W, D], or [N, H, W, D] with a leading
frame/batch axis (every operation here accepts both).  Convolution kernels
are [out_channels, in_channels, kh, kw].  All operations register reverse
rules on the active tape and are validated against the naive oracles in
``reference``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import ShapeError, Tensor, record

POOL_KINDS = ("max", "average", "dilated_max", "dilated_average")


@dataclass
class Conv2dParams:
    """Cross-correlation parameters: kernel [Dout, Din, kh, kw], bias [Dout]."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d, got shape {list(self.kernel.shape)}")
        if self.bias.data.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError(
                f"conv bias shape {list(self.bias.shape)} does not match "
                f"{self.kernel.shape[0]} output channels"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")


@dataclass
class PoolParams:
    """Window pooling parameters; dilated kinds must have dilation >= 2."""

    kind: str
    window: int
    stride: int
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in POOL_KINDS:
            raise ValueError(f"unknown pool kind {self.kind!r}, expected one of {POOL_KINDS}")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")
        dilated = self.kind.startswith("dilated")
        if dilated and self.dilation < 2:
            raise ValueError(f"{self.kind} pooling requires dilation >= 2")
        if not dilated and self.dilation != 1:
            raise ValueError(f"{self.kind} pooling requires dilation == 1")


def _as_batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} expects a [H,W,D] or [N,H,W,D] map, got shape {list(x.shape)}")


def _windows(xp: np.ndarray, ho: int, wo: int, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s0, stride * s1, stride * s2, dilation * s1, dilation * s2, s3),
    )


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-d cross-correlation with stride, zero padding, and kernel dilation.

    [.., H, W, Din] -> [.., H', W', Dout] with
    H' = floor((H + 2 pad - dilation (kh - 1) - 1) / stride) + 1.
    """
    x4, squeeze = _as_batched(x, "conv2d")
    n, h, w, cin = x4.shape
    cout, kin, kh, kw = p.kernel.shape
    if kin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kin}")
    stride, pad, dil = p.stride, p.padding, p.dilation
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {pad}, dilation {dil}"
        )

    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
        xp[:, pad:pad + h, pad:pad + w, :] = x4
    else:
        xp = x4
    cols = _windows(xp, ho, wo, kh, kw, stride, dil).reshape(n * ho * wo, kh * kw * cin)
    wmat = p.kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    y = (cols @ wmat + p.bias.data).reshape(n, ho, wo, cout)

    needs = x.requires_grad or p.kernel.requires_grad or p.bias.requires_grad
    out = Tensor(y[0] if squeeze else y, needs)

    def fn(g, acc):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n * ho * wo, cout)
        if p.bias.requires_grad:
            acc(p.bias, g2.sum(axis=0))
        if p.kernel.requires_grad:
            dw = (cols.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
            acc(p.kernel, np.ascontiguousarray(dw))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
            for a in range(kh):
                ia = a * dil
                for b in range(kw):
                    jb = b * dil
                    dxp[:, ia:ia + stride * ho:stride, jb:jb + stride * wo:stride, :] += dcols[:, :, :, a, b, :]
            dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
            acc(x, dx[0] if squeeze else dx)

    return record(out, (x, p.kernel, p.bias), fn)


def pool2d(x: Tensor, p: PoolParams) -> Tensor:
    """Per-channel window max or mean over a (possibly dilated) receptive field.

    The output extent is floor((H - window) / stride) + 1 for every kind, so a
    dilated pool downsamples by exactly the same ratio as its non-dilated
    counterpart; dilated taps that fall outside the input are dropped from the
    window (max ignores them, average divides by the in-bounds tap count).
    """
    x4, squeeze = _as_batched(x, "pool2d")
    n, h, w, c = x4.shape
    win, stride, dil = p.window, p.stride, p.dilation
    if win > h or win > w:
        raise ShapeError(f"pool2d: window {win} larger than input extent {h}x{w}")
    ho = (h - win) // stride + 1
    wo = (w - win) // stride + 1
    # right/bottom padding so every dilated tap has an address; padded cells
    # are masked out of the result
    hn = (ho - 1) * stride + dil * (win - 1) + 1
    wn = (wo - 1) * stride + dil * (win - 1) + 1
    ph, pw = max(0, hn - h), max(0, wn - w)
    is_max = p.kind in ("max", "dilated_max")

    if ph or pw:
        fill = -np.inf if is_max else 0.0
        xp = np.full((n, h + ph, w + pw, c), fill)
        xp[:, :h, :w, :] = x4
    else:
        xp = x4
    windows = _windows(xp, ho, wo, win, win, stride, dil)

    if is_max:
        y = windows.max(axis=(3, 4))
        counts = None
    else:
        if ph or pw:
            ones = np.zeros((1, h + ph, w + pw, 1))
            ones[:, :h, :w, :] = 1.0
            counts = _windows(ones, ho, wo, win, win, stride, dil).sum(axis=(3, 4))
        else:
            counts = np.full((1, ho, wo, 1), float(win * win))
        y = windows.sum(axis=(3, 4)) / counts
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def fn(g, acc):
        g4 = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        if is_max:
            claimed = np.zeros(y.shape, dtype=bool)
            for a in range(win):
                ia = a * dil
                for b in range(win):
                    jb = b * dil
                    sl = xp[:, ia:ia + stride * ho:stride, jb:jb + stride * wo:stride, :]
                    hit = (sl == y) & ~claimed
                    dxp[:, ia:ia + stride * ho:stride, jb:jb + stride * wo:stride, :] += g4 * hit
                    claimed |= hit
        else:
            share = g4 / counts
            for a in range(win):
                ia = a * dil
                for b in range(win):
                    jb = b * dil
                    dxp[:, ia:ia + stride * ho:stride, jb:jb + stride * wo:stride, :] += share
        dx = dxp[:, :h, :w, :]
        acc(x, dx[0] if squeeze else dx)

    return record(out, (x,), fn)


def upsample_zero_pad(x: Tensor, factor: int) -> Tensor:
    """Place x[i, j] at [factor*i, factor*j] and fill the rest with zeros."""
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be >= 1")
    if f == 1:
        return x
    x4, squeeze = _as_batched(x, "upsample_zero_pad")
    n, h, w, c = x4.shape
    y = np.zeros((n, f * h, f * w, c))
    y[:, ::f, ::f, :] = x4
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def fn(g, acc):
        g4 = g[None] if squeeze else g
        dx = np.ascontiguousarray(g4[:, ::f, ::f, :])
        acc(x, dx[0] if squeeze else dx)

    return record(out, (x,), fn)


def multiscale_branch(x: Tensor, strides: list[int]) -> list[Tensor]:
    """Downsampled copies of x, one per stride (average pool, window = stride).

    Stride 1 returns x itself; coarser branches are realigned later with
    ``upsample_zero_pad`` before fusion.
    """
    branches = []
    for s in strides:
        if s < 1:
            raise ValueError(f"multiscale stride must be >= 1, got {s}")
        if s == 1:
            branches.append(x)
        else:
            branches.append(pool2d(x, PoolParams(kind="average", window=s, stride=s)))
    return branches


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the spatial axes: [H,W,D] -> [D] or [N,H,W,D] -> [N,D]."""
    x4, squeeze = _as_batched(x, "global_avg_pool")
    n, h, w, c = x4.shape
    y = x4.mean(axis=(1, 2))
    out = Tensor(y[0] if squeeze else y, x.requires_grad)

    def fn(g, acc):
        g4 = g[None] if squeeze else g
        dx = np.broadcast_to(g4[:, None, None, :] / (h * w), (n, h, w, c)).copy()
        acc(x, dx[0] if squeeze else dx)

    return record(out, (x,), fn)
