"""Streaming estimation of feature means and structured covariances.

Five covariance structures are supported for a (C, H, W) feature layout:

* ``full``          one N x N covariance over all features (N = C*H*W)
* ``per-channel``   C separate HW x HW spatial covariances
* ``kron``          per channel, an H x H and a W x W Kronecker factor
* ``channel-joint`` one HW x HW spatial covariance pooled over channels
* ``meanvar``       per-channel scalar mean and variance only

Accumulators hold raw float64 sums (count, sum x, sum xx^T) so batches can
be streamed in any split and shards merged; centering happens at finalize.
Covariances use the population normalizer 1/P. Means are per feature, i.e.
per (c, h, w); only ``meanvar`` reduces to per-channel scalars, mirroring
what a batchnorm layer would track.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO

import numpy as np

from .errors import FormatError, InsufficientDataError, SpecError
from .tensor import FeatureMatrix

_MAGIC = b"SMST"
_VERSION = 1


class CovKind(str, Enum):
    FULL = "full"
    PER_CHANNEL = "per-channel"
    KRON = "kron"
    CHANNEL_JOINT = "channel-joint"
    MEAN_VAR = "meanvar"

    @property
    def needs_layout(self) -> bool:
        return self is not CovKind.FULL


_KIND_TAGS = {k: i for i, k in enumerate(CovKind)}
_TAG_KINDS = {i: k for k, i in _KIND_TAGS.items()}


def _layout_of(fm: FeatureMatrix, kind: CovKind) -> tuple[int, int, int] | None:
    if not kind.needs_layout:
        return fm.layout
    if fm.layout is None:
        raise SpecError(f"{kind.value} statistics require a (C, H, W) layout")
    return fm.layout


@dataclass
class MomentAccumulator:
    """Raw moment sums for one covariance structure; single-writer, mergeable."""

    kind: CovKind
    nfeat: int
    layout: tuple[int, int, int] | None
    count: int = 0
    sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    raw: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def empty(cls, kind: CovKind, nfeat: int, layout: tuple[int, int, int] | None) -> "MomentAccumulator":
        kind = CovKind(kind)
        if kind.needs_layout:
            if layout is None:
                raise SpecError(f"{kind.value} statistics require a (C, H, W) layout")
            c, h, w = layout
            if c * h * w != nfeat:
                raise SpecError(f"layout {layout} does not tile {nfeat} features")
        acc = cls(kind=kind, nfeat=nfeat, layout=layout)
        acc.sum = np.zeros(nfeat, dtype=np.float64)
        c, h, w = layout if layout is not None else (0, 0, 0)
        if kind is CovKind.FULL:
            acc.raw["xtx"] = np.zeros((nfeat, nfeat), dtype=np.float64)
        elif kind is CovKind.PER_CHANNEL:
            acc.raw["xtx_c"] = np.zeros((c, h * w, h * w), dtype=np.float64)
        elif kind is CovKind.KRON:
            acc.raw["hh"] = np.zeros((c, h, h), dtype=np.float64)
            acc.raw["ww"] = np.zeros((c, w, w), dtype=np.float64)
        elif kind is CovKind.CHANNEL_JOINT:
            acc.raw["xtx_j"] = np.zeros((h * w, h * w), dtype=np.float64)
        elif kind is CovKind.MEAN_VAR:
            acc.raw["sumsq_c"] = np.zeros(c, dtype=np.float64)
        return acc

    def _check_batch(self, batch: FeatureMatrix) -> None:
        if batch.cols != self.nfeat:
            raise SpecError(f"batch has {batch.cols} features, accumulator {self.nfeat}")
        if self.kind.needs_layout and batch.layout != self.layout:
            raise SpecError(f"batch layout {batch.layout} != accumulator layout {self.layout}")


def accumulate(acc: MomentAccumulator, batch: FeatureMatrix) -> MomentAccumulator:
    """Fold a batch of examples into the accumulator (float64 sums)."""
    acc._check_batch(batch)
    x = batch.data.astype(np.float64, copy=False)
    p = batch.rows
    acc.count += p
    acc.sum += x.sum(axis=0)
    kind = acc.kind
    if kind is CovKind.FULL:
        acc.raw["xtx"] += x.T @ x
    elif kind in (CovKind.PER_CHANNEL, CovKind.CHANNEL_JOINT, CovKind.KRON):
        c, h, w = acc.layout  # type: ignore[misc]
        maps = x.reshape(p, c, h, w)
        if kind is CovKind.KRON:
            for ci in range(c):
                rows = maps[:, ci].transpose(1, 0, 2).reshape(h, p * w)
                cols = maps[:, ci].transpose(2, 0, 1).reshape(w, p * h)
                acc.raw["hh"][ci] += rows @ rows.T
                acc.raw["ww"][ci] += cols @ cols.T
        else:
            flat = maps.reshape(p, c, h * w)
            if kind is CovKind.PER_CHANNEL:
                for ci in range(c):
                    xc = flat[:, ci]
                    acc.raw["xtx_c"][ci] += xc.T @ xc
            else:
                pooled = flat.reshape(p * c, h * w)
                acc.raw["xtx_j"] += pooled.T @ pooled
    elif kind is CovKind.MEAN_VAR:
        c, h, w = acc.layout  # type: ignore[misc]
        acc.raw["sumsq_c"] += (x * x).reshape(p, c, h * w).sum(axis=(0, 2))
    return acc


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    """Combine two shard accumulators; associative and commutative."""
    if a.kind != b.kind or a.nfeat != b.nfeat or a.layout != b.layout:
        raise SpecError("cannot merge accumulators with different specs")
    out = MomentAccumulator.empty(a.kind, a.nfeat, a.layout)
    out.count = a.count + b.count
    out.sum = a.sum + b.sum
    for key in a.raw:
        out.raw[key] = a.raw[key] + b.raw[key]
    return out


@dataclass(frozen=True)
class CovStats:
    """Finalized mean plus covariance pieces for one structure.

    The same container carries square-root factors downstream: the matcher
    stores Q = sqrt(covariance) in identical structure (``channel_var`` then
    holds per-channel standard deviations).
    """

    kind: CovKind
    count: int
    mean: np.ndarray                                  # (N,) float64
    layout: tuple[int, int, int] | None = None
    full: np.ndarray | None = None                    # (N, N)
    per_channel: np.ndarray | None = None             # (C, HW, HW)
    kron_h: np.ndarray | None = None                  # (C, H, H)
    kron_w: np.ndarray | None = None                  # (C, W, W)
    joint: np.ndarray | None = None                   # (HW, HW)
    channel_mean: np.ndarray | None = None            # (C,)
    channel_var: np.ndarray | None = None             # (C,)


def kron_factorize(acc: MomentAccumulator) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel Kronecker factors (C_H, C_W) from raw sums.

    The scale ambiguity of A (x) B is fixed by trace(C_W) = W, which makes
    trace(C_H) * trace(C_W) equal the total centered variance of the channel.
    A zero-variance channel gets C_H = 0, C_W = I.
    """
    if acc.kind is not CovKind.KRON:
        raise SpecError(f"kron_factorize needs a kron accumulator, got {acc.kind.value}")
    c, h, w = acc.layout  # type: ignore[misc]
    p = acc.count
    mean_maps = (acc.sum / p).reshape(c, h, w)
    c_h = np.empty((c, h, h))
    c_w = np.empty((c, w, w))
    for ci in range(c):
        m = mean_maps[ci]
        cen_hh = acc.raw["hh"][ci] - p * (m @ m.T)
        cen_ww = acc.raw["ww"][ci] - p * (m.T @ m)
        total = float(np.trace(cen_hh)) / p  # == trace(cen_ww)/p
        if total <= 0.0:
            c_h[ci] = 0.0
            c_w[ci] = np.eye(w)
            continue
        s_h = cen_hh / (p * w)
        s_w = cen_ww / (p * h)
        c_h[ci] = (s_h + s_h.T) / 2.0
        scaled = s_w * (w * h / total)
        c_w[ci] = (scaled + scaled.T) / 2.0
    return c_h, c_w


def finalize(acc: MomentAccumulator) -> CovStats:
    """Center the raw sums into mean and covariance pieces (1/P normalizer)."""
    if acc.count < 2:
        raise InsufficientDataError(f"need at least 2 examples, got {acc.count}")
    p = acc.count
    mean = acc.sum / p
    kind = acc.kind
    kw: dict = {}
    if kind is CovKind.FULL:
        cov = acc.raw["xtx"] / p - np.outer(mean, mean)
        kw["full"] = (cov + cov.T) / 2.0
    elif kind is CovKind.PER_CHANNEL:
        c, h, w = acc.layout  # type: ignore[misc]
        mu = mean.reshape(c, h * w)
        covs = acc.raw["xtx_c"] / p - mu[:, :, None] * mu[:, None, :]
        kw["per_channel"] = (covs + covs.transpose(0, 2, 1)) / 2.0
    elif kind is CovKind.KRON:
        kw["kron_h"], kw["kron_w"] = kron_factorize(acc)
    elif kind is CovKind.CHANNEL_JOINT:
        c, h, w = acc.layout  # type: ignore[misc]
        mu = mean.reshape(c, h * w)
        cov = acc.raw["xtx_j"] / (p * c) - (mu.T @ mu) / c
        kw["joint"] = (cov + cov.T) / 2.0
    elif kind is CovKind.MEAN_VAR:
        c, h, w = acc.layout  # type: ignore[misc]
        hw = h * w
        cmean = mean.reshape(c, hw).mean(axis=1)
        kw["channel_mean"] = cmean
        kw["channel_var"] = np.maximum(acc.raw["sumsq_c"] / (p * hw) - cmean**2, 0.0)
    return CovStats(kind=kind, count=p, mean=mean, layout=acc.layout, **kw)


def estimate(kind: CovKind, fm: FeatureMatrix, batch: int = 4096) -> CovStats:
    """One-shot mean/covariance of a feature matrix, streamed in batches."""
    layout = _layout_of(fm, CovKind(kind))
    acc = MomentAccumulator.empty(kind, fm.cols, layout)
    for lo in range(0, fm.rows, batch):
        chunk = FeatureMatrix(fm.data[lo : lo + batch], layout=fm.layout)
        accumulate(acc, chunk)
    return finalize(acc)


def channel_variance(stats: CovStats) -> np.ndarray:
    """Total per-channel variance (about the per-channel scalar mean).

    Defined for every structure except channel-joint, where per-channel
    information has been pooled away.
    """
    if stats.kind is CovKind.MEAN_VAR:
        return stats.channel_var.copy()
    if stats.layout is None:
        raise SpecError("channel_variance requires a (C, H, W) layout")
    c, h, w = stats.layout
    hw = h * w
    mu = stats.mean.reshape(c, hw)
    spread = ((mu - mu.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    if stats.kind is CovKind.FULL:
        diag = np.diag(stats.full).reshape(c, hw).sum(axis=1)
    elif stats.kind is CovKind.PER_CHANNEL:
        diag = np.trace(stats.per_channel, axis1=1, axis2=2)
    elif stats.kind is CovKind.KRON:
        diag = np.trace(stats.kron_h, axis1=1, axis2=2) * np.trace(stats.kron_w, axis1=1, axis2=2)
    else:
        raise SpecError(f"channel variance is pooled away for {stats.kind.value}")
    return diag / hw + spread


# ---------------------------------------------------------------------------
# Serialization: magic "SMST", u32 version, kind tag, layout, little-endian
# float64 payloads. Round-trips are bit-exact.
# ---------------------------------------------------------------------------

_FACTOR_FIELDS = {
    CovKind.FULL: ("full",),
    CovKind.PER_CHANNEL: ("per_channel",),
    CovKind.KRON: ("kron_h", "kron_w"),
    CovKind.CHANNEL_JOINT: ("joint",),
    CovKind.MEAN_VAR: ("channel_mean", "channel_var"),
}


def _factor_shapes(kind: CovKind, n: int, layout) -> dict[str, tuple[int, ...]]:
    c, h, w = layout if layout is not None else (0, 0, 0)
    return {
        CovKind.FULL: {"full": (n, n)},
        CovKind.PER_CHANNEL: {"per_channel": (c, h * w, h * w)},
        CovKind.KRON: {"kron_h": (c, h, h), "kron_w": (c, w, w)},
        CovKind.CHANNEL_JOINT: {"joint": (h * w, h * w)},
        CovKind.MEAN_VAR: {"channel_mean": (c,), "channel_var": (c,)},
    }[kind]


def write_cov_stats(fh: BinaryIO, stats: CovStats) -> None:
    layout = stats.layout if stats.layout is not None else (0, 0, 0)
    has_layout = 1 if stats.layout is not None else 0
    fh.write(struct.pack("<4sII", _MAGIC, _VERSION, _KIND_TAGS[stats.kind]))
    fh.write(struct.pack("<IIIIQI", has_layout, *layout, stats.count, stats.mean.size))
    fh.write(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
    for name in _FACTOR_FIELDS[stats.kind]:
        arr = getattr(stats, name)
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, nbytes: int) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated stats block: wanted {nbytes} bytes, got {len(buf)}")
    return buf


def read_cov_stats(fh: BinaryIO) -> CovStats:
    magic, version, tag = struct.unpack("<4sII", _read_exact(fh, 12))
    if magic != _MAGIC:
        raise FormatError(f"bad stats magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported stats version {version}")
    if tag not in _TAG_KINDS:
        raise FormatError(f"unknown covariance kind tag {tag}")
    kind = _TAG_KINDS[tag]
    has_layout, c, h, w, count, n = struct.unpack("<IIIIQI", _read_exact(fh, 28))
    layout = (c, h, w) if has_layout else None
    if kind.needs_layout and layout is None:
        raise FormatError(f"{kind.value} stats block missing layout")
    mean = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").copy()
    kw: dict = {}
    for name, shape in _factor_shapes(kind, n, layout).items():
        size = int(np.prod(shape)) if shape else 0
        kw[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").copy().reshape(shape)
    return CovStats(kind=kind, count=count, mean=mean, layout=layout, **kw)


def save_cov_stats(path, stats: CovStats) -> None:
    with open(path, "wb") as fh:
        write_cov_stats(fh, stats)


def load_cov_stats(path) -> CovStats:
    with open(path, "rb") as fh:
        return read_cov_stats(fh)
