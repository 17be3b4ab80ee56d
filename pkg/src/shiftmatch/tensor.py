"""Dense float32 tensors and the numeric kernels shared by every module.

Tensors are plain numpy arrays (row-major, float32 by default). Reductions
and matrix products accumulate in float64 so that statistics over 10k+
examples keep ~1e-6 accuracy, then cast back to the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

# Examples per im2col block; sized to keep the unfolded patch buffer
# cache-friendly (measurably faster than one big buffer).
_CONV_BLOCK_FLOATS = 1_000_000



@dataclass(frozen=True)
class FeatureMatrix:
    """A P x N view of layer activations (P examples, N features).

    ``layout`` optionally records a (C, H, W) interpretation of the feature
    axis with N == C*H*W; it is metadata only, the buffer is never copied.
    """

    data: np.ndarray
    layout: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimensionError(f"FeatureMatrix needs a 2-D array, got {self.data.shape}")
        p, n = self.data.shape
        if p < 1 or n < 1:
            raise DimensionError(f"empty FeatureMatrix {self.data.shape}")
        if self.layout is not None:
            c, h, w = self.layout
            if c < 1 or h < 1 or w < 1 or c * h * w != n:
                raise DimensionError(f"layout {self.layout} does not tile {n} features")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> bool:
        return self.layout is not None and self.layout[1] * self.layout[2] > 1

    @classmethod
    def from_maps(cls, x: np.ndarray) -> "FeatureMatrix":
        """Reinterpret a (P, C, H, W) stack of feature maps without copying."""
        if x.ndim != 4:
            raise DimensionError(f"expected (P, C, H, W), got {x.shape}")
        p, c, h, w = x.shape
        return cls(x.reshape(p, c * h * w), layout=(c, h, w))

    @classmethod
    def from_array(cls, x: np.ndarray) -> "FeatureMatrix":
        """Wrap a 2-D (P, N) array, or a 4-D map stack with its layout."""
        if x.ndim == 4:
            return cls.from_maps(x)
        if x.ndim == 2:
            return cls(x, layout=(x.shape[1], 1, 1))
        raise DimensionError(f"cannot interpret shape {x.shape} as features")

    def maps(self) -> np.ndarray:
        """The (P, C, H, W) view; requires a layout."""
        if self.layout is None:
            raise DimensionError("FeatureMatrix has no (C, H, W) layout")
        c, h, w = self.layout
        return self.data.reshape(self.rows, c, h, w)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, cast back to the input dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    dtype = np.result_type(a.dtype, b.dtype)
    return out if dtype == np.float64 else out.astype(dtype)


def reduce_mean(fm: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Per-feature mean over the example axis, accumulated in float64."""
    data = fm.data if isinstance(fm, FeatureMatrix) else data_check_2d(np.asarray(fm))
    return data.mean(axis=0, dtype=np.float64)


def data_check_2d(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got {x.shape}")
    return x


def _unfold(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View (P, C, Hp, Wp) as float64 patches (P, Ho, Wo, C, kh, kw); copies once."""
    p, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    shape = (p, c, ho, wo, kh, kw)
    strides = (s0, s1, s2 * stride, s3 * stride, s2, s3)
    cols = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)
    return cols.transpose(0, 2, 3, 1, 4, 5).astype(np.float64)


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    circular: bool = False,
) -> np.ndarray:
    """2-D cross-correlation of (P, C, H, W) inputs with (O, C, kh, kw) kernels.

    With ``circular=True`` spatial indices wrap modulo H and W and the kernel
    is centered (offset kh//2, kw//2), so the operator commutes exactly with
    cyclic shifts; ``pad`` is ignored in that mode and H, W must be divisible
    by ``stride``. Implemented as im2col + matmul in example blocks; float64
    accumulation throughout.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape}, {w.shape}")
    p, c, h, ww = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"channel mismatch: input {c}, kernel {cw}")
    if stride < 1:
        raise DimensionError(f"invalid stride {stride}")

    if circular:
        if kh > h or kw > ww:
            raise DimensionError(f"circular kernel {kh}x{kw} larger than image {h}x{ww}")
        if h % stride or ww % stride:
            raise DimensionError("circular conv2d requires stride to divide H and W")
        ho, wo = h // stride, ww // stride
        lh, lw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (0, 0), (lh, kh - 1 - lh), (lw, kw - 1 - lw)), mode="wrap")
    else:
        if pad < 0:
            raise DimensionError(f"invalid pad {pad}")
        if kh > h + 2 * pad or kw > ww + 2 * pad:
            raise DimensionError(f"kernel {kh}x{kw} larger than padded image")
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (ww + 2 * pad - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    wmat = w.reshape(o, c * kh * kw).astype(np.float64, copy=False)
    out = np.empty((p, o, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    block = max(1, _CONV_BLOCK_FLOATS // max(1, c * kh * kw * ho * wo))
    for lo in range(0, p, block):
        hi = min(lo + block, p)
        cols = _unfold(xp[lo:hi], kh, kw, stride, ho, wo)
        blk = cols.reshape((hi - lo) * ho * wo, c * kh * kw) @ wmat.T
        out[lo:hi] = blk.reshape(hi - lo, ho, wo, o).transpose(0, 3, 1, 2)
    return out
