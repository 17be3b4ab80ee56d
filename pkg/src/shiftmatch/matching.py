"""Test-time matching of feature means and covariances to training statistics.

The central transform maps a mean-subtracted test feature matrix through the
inverse square root of its own covariance and the square root of the stored
training covariance, then restores the training mean:

    match(H_test) = (H_test - M_test) Q*_test Q_train + M_train

Applied to the training data itself this is the identity, so networks can be
trained (or sampled) without any matching layers and matched only at test
time. For convolutional feature maps the covariance is structured per
channel (see covstats); the Kronecker variant applies an H-side factor on
the row axis and a W-side factor on the column axis of each channel map.

``eps`` throughout this module is a *relative* ridge: the inverse square
root of a test covariance A is taken with absolute shift eps * trace(A)/n.
Training-side square roots are never ridged (they are never inverted).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from . import covstats as cs
from .covstats import CovKind, CovStats
from .errors import DimensionError, FormatError, IllConditionedError, SpecError
from .linalg import COND_FLOOR, scale_eps, sym_eig, sym_invsqrt, sym_sqrt
from .netmodel import LayerGraph, WeightSample, forward, run_layers, softmax
from .tensor import FeatureMatrix

_STATS_MAGIC = b"SMTS"
_STATS_VERSION = 1

DEFAULT_EPS = 1e-5
SIGMA_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Input-layer transforms and prior covariances
# ---------------------------------------------------------------------------


def second_moment(x: FeatureMatrix) -> np.ndarray:
    """Uncentered (1/P) X^T X in float64."""
    d = x.data.astype(np.float64, copy=False)
    m = d.T @ d / x.rows
    return (m + m.T) / 2.0


def shiftempcov(x_test: FeatureMatrix, q_train: np.ndarray) -> FeatureMatrix:
    """Right-multiply inputs by the training square-root factor, X_test Q.

    With an isotropic N(0, I/N) weight prior this reproduces the
    function-space covariance induced by an empirical-input-covariance
    weight prior.
    """
    q_train = np.asarray(q_train, dtype=np.float64)
    if q_train.shape != (x_test.cols, x_test.cols):
        raise DimensionError(f"factor shape {q_train.shape} != features {x_test.cols}")
    out = x_test.data.astype(np.float64, copy=False) @ q_train
    return FeatureMatrix(out.astype(x_test.data.dtype), layout=x_test.layout)


def prior_cov_empcov(x_train: FeatureMatrix) -> np.ndarray:
    """Weight-prior covariance proportional to the empirical input covariance:
    (1/(N P)) X^T X."""
    return second_moment(x_train) / x_train.cols


def prior_cov_zellner(x_train: FeatureMatrix, eps: float = 0.0) -> np.ndarray:
    """The opposite prior, (1/N) ((1/P) X^T X + eps I)^{-1}, magnifying
    low-variance input directions."""
    m = second_moment(x_train)
    values, vectors = sym_eig(m)
    values = np.maximum(values, 0.0)
    if eps == 0.0:
        lam_max = float(values[0])
        if lam_max <= 0 or float(values[-1]) / lam_max < COND_FLOOR:
            raise IllConditionedError("input second moment is singular; pass eps > 0")
    inv = (vectors / (values + eps)) @ vectors.T
    return (inv + inv.T) / 2.0 / x_train.cols


# ---------------------------------------------------------------------------
# Square-root bundles and the matching transforms
# ---------------------------------------------------------------------------


def sqrt_stats(stats: CovStats) -> CovStats:
    """Square-root factors of every covariance piece, in the same container.

    For meanvar statistics ``channel_var`` holds standard deviations.
    """
    kw: dict = {}
    if stats.kind is CovKind.FULL:
        kw["full"] = sym_sqrt(stats.full)
    elif stats.kind is CovKind.PER_CHANNEL:
        kw["per_channel"] = np.stack([sym_sqrt(m) for m in stats.per_channel])
    elif stats.kind is CovKind.KRON:
        kw["kron_h"] = np.stack([sym_sqrt(m) for m in stats.kron_h])
        kw["kron_w"] = np.stack([sym_sqrt(m) for m in stats.kron_w])
    elif stats.kind is CovKind.CHANNEL_JOINT:
        kw["joint"] = sym_sqrt(stats.joint)
    elif stats.kind is CovKind.MEAN_VAR:
        kw["channel_mean"] = stats.channel_mean.copy()
        kw["channel_var"] = np.sqrt(stats.channel_var)
    return CovStats(kind=stats.kind, count=stats.count, mean=stats.mean.copy(),
                    layout=stats.layout, **kw)


def _invsqrt_ridged(a: np.ndarray, eps: float) -> np.ndarray:
    if eps <= 0.0:
        return sym_invsqrt(a, 0.0)
    # Floor the trace-relative ridge so an all-zero factor (a dead channel)
    # stays finite; its centered data is exactly zero, so the match then
    # resolves to the training mean.
    return sym_invsqrt(a, max(scale_eps(a, eps), eps * 1e-12))


def match_full_factors(x: np.ndarray, test_mean: np.ndarray, qstar_test: np.ndarray,
                       q_train: np.ndarray, train_mean: np.ndarray) -> np.ndarray:
    """(x - m_test) Q*_test Q_train + m_train with float64 arithmetic.

    The two factors compose first: one N x N product instead of a second
    pass over all P examples, and the composition cancels shared spectrum
    before it ever multiplies data.
    """
    xt = x.astype(np.float64, copy=False) - test_mean
    return xt @ (qstar_test @ q_train) + train_mean


def _check_compat(h: FeatureMatrix, q: CovStats) -> None:
    if h.cols != q.mean.size:
        raise SpecError(f"feature width {h.cols} != stored statistics {q.mean.size}")
    if q.kind.needs_layout:
        if h.layout is None:
            raise SpecError(f"{q.kind.value} matching requires a (C, H, W) layout")
        if h.layout != q.layout:
            raise SpecError(f"feature layout {h.layout} != stored layout {q.layout}")


def apply_match(h_test: FeatureMatrix, q_train: CovStats, eps: float = DEFAULT_EPS) -> FeatureMatrix:
    """Match a test feature matrix to stored training statistics.

    ``q_train`` must be a square-root bundle (see ``sqrt_stats``); the test
    statistics are estimated here, over the whole provided batch.
    """
    _check_compat(h_test, q_train)
    kind = q_train.kind
    dtype = h_test.data.dtype
    x = h_test.data.astype(np.float64, copy=False)
    p = h_test.rows

    if kind is CovKind.FULL:
        test = cs.estimate(CovKind.FULL, h_test)
        qstar = _invsqrt_ridged(test.full, eps)
        out = match_full_factors(x, test.mean, qstar, q_train.full, q_train.mean)
        return FeatureMatrix(out.astype(dtype), layout=h_test.layout)

    c, h, w = h_test.layout  # type: ignore[misc]
    maps = x.reshape(p, c, h, w)
    test = cs.estimate(kind, h_test)

    if kind is CovKind.MEAN_VAR:
        sig_test = np.maximum(np.sqrt(test.channel_var), SIGMA_FLOOR)
        sig_train = q_train.channel_var  # stds in a sqrt bundle
        scale = (sig_train / sig_test)[:, None, None]
        shift = (q_train.channel_mean - test.channel_mean * (sig_train / sig_test))[:, None, None]
        out = maps * scale + shift
        return FeatureMatrix(out.reshape(p, c * h * w).astype(dtype), layout=h_test.layout)

    mean_maps = test.mean.reshape(c, h, w)
    train_mean = q_train.mean.reshape(c, h, w)
    out = np.empty_like(maps)

    if kind is CovKind.KRON:
        for ci in range(c):
            a_h = q_train.kron_h[ci] @ _invsqrt_ridged(test.kron_h[ci], eps)
            a_w = _invsqrt_ridged(test.kron_w[ci], eps) @ q_train.kron_w[ci]
            cen = maps[:, ci] - mean_maps[ci]
            out[:, ci] = (a_h @ cen) @ a_w + train_mean[ci]
    elif kind is CovKind.PER_CHANNEL:
        for ci in range(c):
            xfm = _invsqrt_ridged(test.per_channel[ci], eps) @ q_train.per_channel[ci]
            cen = (maps[:, ci] - mean_maps[ci]).reshape(p, h * w)
            out[:, ci] = (cen @ xfm).reshape(p, h, w) + train_mean[ci]
    elif kind is CovKind.CHANNEL_JOINT:
        qstar = _invsqrt_ridged(test.joint, eps)
        xfm = qstar @ q_train.joint
        for ci in range(c):
            cen = (maps[:, ci] - mean_maps[ci]).reshape(p, h * w)
            out[:, ci] = (cen @ xfm).reshape(p, h, w) + train_mean[ci]
    else:  # pragma: no cover
        raise SpecError(f"unsupported covariance kind {kind}")

    return FeatureMatrix(out.reshape(p, c * h * w).astype(dtype), layout=h_test.layout)


def shiftmatch_full(h_test: FeatureMatrix, stats_train: CovStats, eps: float = 0.0) -> FeatureMatrix:
    """Full-covariance matching; ``stats_train`` holds the training covariance."""
    if stats_train.kind is not CovKind.FULL:
        raise SpecError(f"expected full statistics, got {stats_train.kind.value}")
    return apply_match(h_test, sqrt_stats(stats_train), eps)


def shiftmatch_kron(h_test: FeatureMatrix, stats_train: CovStats, eps: float = 0.0) -> FeatureMatrix:
    """Per-channel Kronecker-factored matching of (C, H, W) feature maps."""
    if stats_train.kind is not CovKind.KRON:
        raise SpecError(f"expected kron statistics, got {stats_train.kind.value}")
    return apply_match(h_test, sqrt_stats(stats_train), eps)


def shiftmatch_meanvar(h_test: FeatureMatrix, stats_train: CovStats) -> FeatureMatrix:
    """Per-channel mean/variance matching (the test-time batchnorm analogue)."""
    if stats_train.kind is not CovKind.MEAN_VAR:
        raise SpecError(f"expected meanvar statistics, got {stats_train.kind.value}")
    return apply_match(h_test, sqrt_stats(stats_train), eps=0.0)


# ---------------------------------------------------------------------------
# Placement, training statistics, matched forward passes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SiteAnchor:
    name: str
    edge: int  # features entering layer ``edge`` (0 = raw input)


@dataclass(frozen=True)
class MatchPlacement:
    sites: tuple[SiteAnchor, ...]
    timing: str   # "pre" | "post"
    variant: str  # "all" | "input-only"


def resolve_placement(graph: LayerGraph, timing: str = "pre",
                      variant: str = "all") -> MatchPlacement:
    """Resolve site anchors in a graph.

    ``pre`` places a site on the features entering every conv/linear layer
    (stepping back over a flatten so spatial structure is still visible);
    ``post`` places sites on the raw input and on every activation output.
    ``input-only`` keeps just the first site.
    """
    if timing not in ("pre", "post"):
        raise SpecError(f"unknown timing {timing!r}")
    if variant not in ("all", "input-only"):
        raise SpecError(f"unknown variant {variant!r}")
    anchors: list[SiteAnchor] = []
    seen: set[int] = set()
    if timing == "pre":
        for i in graph.weighted_indices():
            edge = i
            if i > 0 and graph.layers[i - 1].kind == "flatten":
                edge = i - 1
            if edge not in seen:
                seen.add(edge)
                anchors.append(SiteAnchor(f"{graph.layers[i].name}.in", edge))
    else:
        anchors.append(SiteAnchor("input", 0))
        seen.add(0)
        for i, layer in enumerate(graph.layers):
            if layer.kind == "relu" and (i + 1) not in seen:
                seen.add(i + 1)
                anchors.append(SiteAnchor(f"{layer.name}.out", i + 1))
    anchors.sort(key=lambda a: a.edge)
    if variant == "input-only":
        anchors = anchors[:1]
    if not anchors:
        raise SpecError("graph has no matchable sites")
    return MatchPlacement(tuple(anchors), timing, variant)


def site_spec(kind: CovKind, fm: FeatureMatrix) -> CovKind:
    """Covariance structure actually used at a site.

    Spatially structured estimates only make sense on feature maps with
    H*W > 1; on flat features the spatial kinds fall back to one full
    covariance (meanvar stays per-feature).
    """
    if kind in (CovKind.KRON, CovKind.PER_CHANNEL, CovKind.CHANNEL_JOINT) and not fm.spatial:
        return CovKind.FULL
    return kind


@dataclass
class SiteStats:
    name: str
    edge: int
    q: CovStats  # training mean + square-root factors


@dataclass
class TrainStats:
    """Per-weight-sample training statistics for every matching site."""

    sample_id: str
    timing: str
    variant: str
    sites: list[SiteStats]


def acquire_train_stats(graph: LayerGraph, sample: WeightSample, x_train: np.ndarray,
                        placement: MatchPlacement, kind: CovKind = CovKind.KRON,
                        batch: int = 2048) -> TrainStats:
    """Stream the training set through the network, collecting mean and
    square-root covariance factors at every site.

    The forward pass continues with unmodified features: matching the
    training data to its own statistics would be the identity anyway.
    """
    edges = [a.edge for a in placement.sites]
    accs: dict[int, cs.MomentAccumulator] = {}
    n = x_train.shape[0]
    for lo in range(0, n, batch):
        _, tapped = forward(graph, sample, x_train[lo : lo + batch], taps=edges)
        for edge in edges:
            fm = FeatureMatrix.from_array(tapped[edge])
            if edge not in accs:
                spec = site_spec(kind, fm)
                accs[edge] = cs.MomentAccumulator.empty(spec, fm.cols, fm.layout)
            cs.accumulate(accs[edge], fm)
    sites = [
        SiteStats(anchor.name, anchor.edge, sqrt_stats(cs.finalize(accs[anchor.edge])))
        for anchor in placement.sites
    ]
    return TrainStats(sample.sample_id, placement.timing, placement.variant, sites)


def matched_forward(graph: LayerGraph, sample: WeightSample, stats: TrainStats,
                    x_test: np.ndarray, eps: float = DEFAULT_EPS,
                    return_sites: bool = False):
    """Forward pass with every site matched to its training statistics.

    Test statistics are computed over the entire provided batch at each
    site, in depth order, because matching upstream changes the features
    seen downstream. Returns logits, plus the post-transform feature at
    every site when ``return_sites`` is set.
    """
    h = x_test
    pos = 0
    tapped: dict[str, np.ndarray] = {}
    for site in stats.sites:
        if site.edge < pos:
            raise SpecError(f"sites out of order at {site.name}")
        h = run_layers(graph, sample, h, pos, site.edge)
        fm = FeatureMatrix.from_array(h)
        matched = apply_match(fm, site.q, eps)
        h = matched.data.reshape(h.shape)
        if return_sites:
            tapped[site.name] = h
        pos = site.edge
    logits = run_layers(graph, sample, h, pos, None)
    if return_sites:
        return logits, tapped
    return logits


def bma_predict(graph: LayerGraph, samples: Sequence[WeightSample],
                stats: Sequence["TrainStats | str | Path"] | None,
                x_test: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Average the per-sample softmax predictions (Bayesian model averaging).

    ``stats`` may be None (plain, unmatched forward passes) or one entry per
    sample: a TrainStats or a path to load lazily so that only one sample's
    statistics are ever resident.
    """
    if len(samples) < 1:
        raise SpecError("bma_predict needs at least one weight sample")
    if stats is not None and len(stats) != len(samples):
        raise SpecError(f"{len(samples)} samples but {len(stats)} statistics bundles")
    probs: np.ndarray | None = None
    for i, sample in enumerate(samples):
        if stats is None:
            logits, _ = forward(graph, sample, x_test)
        else:
            entry = stats[i]
            if not isinstance(entry, TrainStats):
                entry = load_train_stats(entry)
            if entry.sample_id != sample.sample_id:
                raise SpecError(
                    f"statistics for sample {entry.sample_id!r} used with {sample.sample_id!r}"
                )
            logits = matched_forward(graph, sample, entry, x_test, eps)
        p = softmax(logits)
        probs = p if probs is None else probs + p
    return probs / len(samples)


def categorical_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of integer labels under row distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise SpecError(f"probs {probs.shape} incompatible with labels {labels.shape}")
    sums = probs.sum(axis=1)
    if float(np.abs(sums - 1.0).max()) > 1e-4:
        raise SpecError("probability rows do not sum to 1 within 1e-4")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise SpecError("label out of range")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties break to the lowest class index."""
    return float((np.argmax(probs, axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# TrainStats serialization: magic "SMTS", then per-site stats blocks in the
# covstats format (factors are square roots). Deterministic byte layout.
# ---------------------------------------------------------------------------

_TIMING_TAGS = {"pre": 0, "post": 1}
_VARIANT_TAGS = {"all": 0, "input-only": 1}
_TAG_TIMING = {v: k for k, v in _TIMING_TAGS.items()}
_TAG_VARIANT = {v: k for k, v in _VARIANT_TAGS.items()}


def write_train_stats(fh: BinaryIO, stats: TrainStats) -> None:
    fh.write(struct.pack("<4sI", _STATS_MAGIC, _STATS_VERSION))
    ident = stats.sample_id.encode()
    fh.write(struct.pack("<I", len(ident)))
    fh.write(ident)
    fh.write(struct.pack("<BBI", _TIMING_TAGS[stats.timing],
                         _VARIANT_TAGS[stats.variant], len(stats.sites)))
    for site in stats.sites:
        name = site.name.encode()
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<I", site.edge))
        cs.write_cov_stats(fh, site.q)


def read_train_stats(fh: BinaryIO) -> TrainStats:
    head = fh.read(8)
    if len(head) != 8:
        raise FormatError("truncated train-stats file")
    magic, version = struct.unpack("<4sI", head)
    if magic != _STATS_MAGIC:
        raise FormatError(f"bad train-stats magic {magic!r}")
    if version != _STATS_VERSION:
        raise FormatError(f"unsupported train-stats version {version}")

    def need(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError("truncated train-stats file")
        return buf

    (idlen,) = struct.unpack("<I", need(4))
    ident = need(idlen).decode()
    ttag, vtag, nsites = struct.unpack("<BBI", need(6))
    if ttag not in _TAG_TIMING or vtag not in _TAG_VARIANT:
        raise FormatError("unknown placement tags in train-stats file")
    sites = []
    for _ in range(nsites):
        (nlen,) = struct.unpack("<I", need(4))
        name = need(nlen).decode()
        (edge,) = struct.unpack("<I", need(4))
        sites.append(SiteStats(name, edge, cs.read_cov_stats(fh)))
    return TrainStats(ident, _TAG_TIMING[ttag], _TAG_VARIANT[vtag], sites)


def save_train_stats(path, stats: TrainStats) -> None:
    with open(path, "wb") as fh:
        write_train_stats(fh, stats)


def load_train_stats(path) -> TrainStats:
    with open(path, "rb") as fh:
        return read_train_stats(fh)
