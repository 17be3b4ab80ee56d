"""Datasets, corruptions, and the stationary-corruption removal check.

Covers IDX file io (MNIST layout, plus a float32 variant for synthetic
data), a generator of stationary signals with a prescribed power spectrum,
circulant (wrap-around) corruption operators, and a procedural digit-glyph
generator that stands in for MNIST where the real files are not available.

Stationary machinery uses the real orthonormal Fourier basis (cos/sin
pairs): every symmetric circulant operator, in particular periodized
Gaussian blur, is exactly diagonal in it, which is what makes the removal
check exact in population mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import covstats as cs
from .covstats import CovKind
from .errors import FormatError, SpecError
from .linalg import scale_eps, sym_invsqrt, sym_sqrt
from .matching import match_full_factors
from .tensor import FeatureMatrix

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_IDX_F32_MAGIC = 0x0000080D


@dataclass
class Dataset:
    """Images (P, C, H, W) in float32 plus integer labels.

    ``spectrum`` is set by the stationary generator and carries the analytic
    per-basis-vector standard deviations needed for population-mode checks.
    """

    images: np.ndarray
    labels: np.ndarray
    spectrum: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise SpecError(f"images must be (P, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise SpecError(f"{self.images.shape[0]} images but labels {self.labels.shape}")
        if not np.isfinite(self.images).all():
            raise SpecError("images contain non-finite values")
        if self.labels.size and self.labels.min() < 0:
            raise SpecError("negative label")

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.spectrum)


# ---------------------------------------------------------------------------
# IDX io (big-endian dims; u8 payload for MNIST files, f32 for the variant)
# ---------------------------------------------------------------------------


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated IDX file: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (P, 1, H, W) float32 scaled to [0, 1]."""
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4))
        if magic == _IDX_IMAGES_MAGIC:
            p, h, w = struct.unpack(">III", _read_exact(fh, 12))
            raw = np.frombuffer(_read_exact(fh, p * h * w), dtype=np.uint8)
            return (raw.reshape(p, 1, h, w).astype(np.float32)) / 255.0
        if magic == _IDX_F32_MAGIC:
            (ndim,) = struct.unpack(">I", _read_exact(fh, 4))
            dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(dims))
            arr = np.frombuffer(_read_exact(fh, 4 * size), dtype=">f4").astype(np.float32)
            arr = arr.reshape(dims)
            if ndim == 3:
                arr = arr[:, None]
            elif ndim != 4:
                raise FormatError(f"float IDX file has {ndim} dims, expected 3 or 4")
            return arr
        raise FormatError(f"bad IDX image magic 0x{magic:08x}")


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, p = struct.unpack(">II", _read_exact(fh, 8))
        if magic != _IDX_LABELS_MAGIC:
            raise FormatError(f"bad IDX label magic 0x{magic:08x}")
        return np.frombuffer(_read_exact(fh, p), dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX image file (and optionally its label file) as a Dataset."""
    images = load_idx_images(images_path)
    if labels_path is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    else:
        labels = load_idx_labels(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(
                f"{images.shape[0]} images but {labels.shape[0]} labels"
            )
    return Dataset(images, labels)


def save_idx_images(path, images: np.ndarray) -> None:
    """Write (P, 1, H, W) float32 in [0, 1] as a u8 MNIST-layout IDX file."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise FormatError(f"u8 IDX layout requires (P, 1, H, W), got {images.shape}")
    p, _, h, w = images.shape
    raw = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, p, h, w))
        fh.write(raw.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise FormatError("labels out of u8 range")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def save_idx_f32(path, images: np.ndarray) -> None:
    """Write a float tensor in the f32 IDX variant (magic 0x0000080D)."""
    arr = np.asarray(images, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_F32_MAGIC, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(">f4").tobytes())


# ---------------------------------------------------------------------------
# Real Fourier basis and stationary signal synthesis
# ---------------------------------------------------------------------------


def real_fourier_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal cos/sin basis of R^n diagonalizing symmetric circulants.

    Returns (V, freqs): columns of V ordered DC, cos1, sin1, cos2, ... and
    ``freqs[k]`` the integer frequency of column k (cos and sin of the same
    frequency share one circulant eigenvalue).
    """
    j = np.arange(n)
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    freqs = [0]
    kmax = n // 2
    for k in range(1, kmax + 1):
        if n % 2 == 0 and k == kmax:
            cols.append(((-1.0) ** j) / np.sqrt(n))
            freqs.append(k)
            break
        ang = 2.0 * np.pi * k * j / n
        cols.append(np.sqrt(2.0 / n) * np.cos(ang))
        freqs.append(k)
        cols.append(np.sqrt(2.0 / n) * np.sin(ang))
        freqs.append(k)
    return np.stack(cols, axis=1), np.asarray(freqs)


def fourier_basis_2d(h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tensor-product basis of R^{HW} (row-major) with per-column axis frequencies."""
    vh, fh = real_fourier_basis(h)
    vw, fw = real_fourier_basis(w)
    v = np.kron(vh, vw)
    freq_h = np.repeat(fh, w)
    freq_w = np.tile(fw, h)
    return v, freq_h, freq_w


def periodized_gaussian_kernel(n: int, sigma: float, wraps: int = 6) -> np.ndarray:
    """Gaussian kernel summed over cyclic wraps, normalized to sum 1."""
    if sigma <= 0:
        raise SpecError(f"sigma must be positive, got {sigma}")
    d = np.arange(n, dtype=np.float64)
    g = np.zeros(n)
    for m in range(-wraps, wraps + 1):
        g += np.exp(-((d + m * n) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _axis_blur_eigenvalues(n: int, sigma: float) -> np.ndarray:
    """Circulant eigenvalue per integer frequency 0..n//2 (real, symmetric kernel)."""
    g = periodized_gaussian_kernel(n, sigma)
    spec = np.fft.rfft(g).real
    return spec[: n // 2 + 1]


def blur_eigenvalues_2d(h: int, w: int, sigma: float) -> np.ndarray:
    """Eigenvalues of the separable circular blur aligned with fourier_basis_2d columns."""
    eh = _axis_blur_eigenvalues(h, sigma)
    ew = _axis_blur_eigenvalues(w, sigma)
    _, freq_h, freq_w = fourier_basis_2d(h, w)
    return eh[freq_h] * ew[freq_w]


def power_law_spectrum(h: int, w: int, alpha: float = 1.5,
                       cutoff: float | None = None) -> np.ndarray:
    """Per-basis-vector standard deviations s(r) = (1 + r)^-alpha by radial frequency.

    With ``cutoff`` set the signal is band-limited: s(r) = 0 for r > cutoff.
    Band-limiting keeps heavy blurs invertible on the signal's support (a
    sigma = 2 blur of an 8x8 torus attenuates the corner frequency to ~7e-18,
    far below float64 resolution, so full-support recovery is impossible).
    """
    _, freq_h, freq_w = fourier_basis_2d(h, w)
    r = np.sqrt(freq_h.astype(np.float64) ** 2 + freq_w.astype(np.float64) ** 2)
    s = (1.0 + r) ** (-alpha)
    if cutoff is not None:
        s = np.where(r <= cutoff, s, 0.0)
    return s


def synth_stationary(p: int, h: int, w: int, spectrum: np.ndarray, seed: int) -> Dataset:
    """Zero-mean stationary samples with population covariance V diag(s^2) V^T."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (h * w,):
        raise SpecError(f"spectrum must have length {h * w}, got {spectrum.shape}")
    if (spectrum < 0).any():
        raise SpecError("spectrum must be nonnegative")
    v, _, _ = fourier_basis_2d(h, w)
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((p, h * w))
    x = (z * spectrum) @ v.T
    images = x.reshape(p, 1, h, w).astype(np.float32)
    return Dataset(images, np.zeros(p, dtype=np.int64), spectrum=spectrum)


# ---------------------------------------------------------------------------
# Corruption operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionOp:
    """One corruption with its parameters; stochastic kinds carry a seed."""

    kind: str  # identity | circulant_blur | gaussian_noise | contrast | pixel_dropout | shift
    sigma: float = 0.0
    alpha: float = 1.0
    p: float = 0.0
    dx: int = 0
    dy: int = 0
    seed: int = 0

    @property
    def linear_stationary(self) -> bool:
        return self.kind in ("identity", "circulant_blur", "shift")

    @property
    def symmetric_stationary(self) -> bool:
        # Diagonal in the real Fourier basis with a real spectrum: the class
        # for which covariance matching can undo the operator pointwise.
        return self.kind in ("identity", "circulant_blur")


def circular_gaussian_filter(x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel circular convolution with a periodized Gaussian, via FFT.

    Exactly the action of the symmetric circulant matrix built from the same
    kernel, up to float64 rounding; preserves the input dtype.
    """
    if x.ndim != 4:
        raise SpecError(f"expected (P, C, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    kern = np.outer(periodized_gaussian_kernel(h, sigma), periodized_gaussian_kernel(w, sigma))
    kf = np.fft.rfft2(kern)
    out = np.fft.irfft2(np.fft.rfft2(x.astype(np.float64)) * kf, s=(h, w))
    return out.astype(x.dtype)


def corruption_matrix(op: CorruptionOp, h: int, w: int) -> np.ndarray:
    """Explicit (HW, HW) matrix of a linear stationary op, row-major flattening."""
    if not op.linear_stationary:
        raise SpecError(f"{op.kind} is not a linear stationary operator")
    if op.kind == "identity":
        return np.eye(h * w)
    if op.kind == "shift":
        c = np.zeros((h * w, h * w))
        for i in range(h):
            for j in range(w):
                c[((i + op.dy) % h) * w + (j + op.dx) % w, i * w + j] = 1.0
        return c
    gh = periodized_gaussian_kernel(h, op.sigma)
    gw = periodized_gaussian_kernel(w, op.sigma)
    ch = np.empty((h, h))
    cw = np.empty((w, w))
    for i in range(h):
        ch[i] = np.roll(gh, i)[:h][np.newaxis]
    for i in range(w):
        cw[i] = np.roll(gw, i)[:w][np.newaxis]
    return np.kron(ch, cw)


def apply_corruption(ds: Dataset, op: CorruptionOp) -> Dataset:
    """Apply a corruption to every image; image-domain ops clip back to [0, 1]."""
    x = ds.images
    if op.kind == "identity":
        out = x.copy()
    elif op.kind == "circulant_blur":
        out = circular_gaussian_filter(x, op.sigma)
    elif op.kind == "shift":
        out = np.roll(x, (op.dy, op.dx), axis=(2, 3))
    elif op.kind == "gaussian_noise":
        rng = np.random.Generator(np.random.PCG64(op.seed))
        out = np.clip(x + rng.normal(0.0, op.sigma, x.shape).astype(np.float32), 0.0, 1.0)
    elif op.kind == "contrast":
        out = np.clip((x - 0.5) * op.alpha + 0.5, 0.0, 1.0)
    elif op.kind == "pixel_dropout":
        rng = np.random.Generator(np.random.PCG64(op.seed))
        mask = rng.random(x.shape) < op.p
        out = np.where(mask, np.float32(0.0), x)
    else:
        raise SpecError(f"unknown corruption kind {op.kind!r}")
    return Dataset(out.astype(np.float32), ds.labels.copy(), ds.spectrum)


def circulant_blur(ds: Dataset, sigma: float) -> Dataset:
    """Circular Gaussian blur of every image; exactly a circulant operator."""
    return apply_corruption(ds, CorruptionOp("circulant_blur", sigma=sigma))


# Intensity axis 1..5 mirrors corruption benchmarks; parameters grow linearly.
_INTENSITY = {
    "blur": lambda i: {"kind": "circulant_blur", "sigma": 0.5 * i},
    "noise": lambda i: {"kind": "gaussian_noise", "sigma": 0.06 * i},
    "contrast": lambda i: {"kind": "contrast", "alpha": 1.0 - 0.15 * i},
    "dropout": lambda i: {"kind": "pixel_dropout", "p": 0.05 * i},
    "shift": lambda i: {"kind": "shift", "dx": i, "dy": i},
}


def corruption_from_name(name: str, intensity: int, seed: int = 0) -> CorruptionOp:
    if name == "clean":
        return CorruptionOp("identity")
    if name not in _INTENSITY:
        raise SpecError(f"unknown corruption {name!r}; have {sorted(_INTENSITY)} and 'clean'")
    if not 1 <= intensity <= 5:
        raise SpecError(f"intensity must be in 1..5, got {intensity}")
    return CorruptionOp(seed=seed, **_INTENSITY[name](intensity))


# ---------------------------------------------------------------------------
# Exact removal of symmetric stationary corruptions
# ---------------------------------------------------------------------------


def exact_removal_check(train: Dataset, test_clean: Dataset, op: CorruptionOp,
                        mode: str = "empirical", eps: float = 0.0) -> float:
    """Corrupt the clean test set, match it to training statistics with the
    full spatial covariance, and report max |recovered - clean| / max |clean|.

    ``population`` mode uses the analytic zero mean and the generator/blur
    spectra directly (the infinite-sample statement); ``empirical`` mode
    estimates both covariances from the given finite samples. The guarantee
    only covers operators diagonal in the Fourier basis with a real
    spectrum; a pure cyclic shift, for instance, leaves the covariance
    unchanged, so matching is the identity and cannot undo it.
    """
    if not op.symmetric_stationary:
        raise SpecError(f"removal guarantee does not apply to {op.kind!r}")
    if mode not in ("population", "empirical"):
        raise SpecError(f"unknown mode {mode!r}")
    if train.images.shape[1] != 1 or test_clean.images.shape[1] != 1:
        raise SpecError("removal check expects single-channel images")
    h, w = train.images.shape[2:]
    if test_clean.images.shape[2:] != (h, w):
        raise SpecError("train/test image sizes disagree")

    clean = test_clean.images.astype(np.float64)
    if op.kind == "circulant_blur":
        corrupted = circular_gaussian_filter(clean, op.sigma)
    else:
        corrupted = clean.copy()
    xc = corrupted.reshape(-1, h * w)
    xt = clean.reshape(-1, h * w)

    if mode == "population":
        if train.spectrum is None:
            raise SpecError("population mode needs the generator spectrum on the train set")
        v, _, _ = fourier_basis_2d(h, w)
        s = train.spectrum
        d_c = blur_eigenvalues_2d(h, w, op.sigma) if op.kind == "circulant_blur" else np.ones(h * w)
        # Pseudo-inverse on directions the signal never occupies (s == 0).
        g = s * d_c
        inv = np.divide(1.0, g, out=np.zeros_like(g), where=s > 0)
        qstar = (v * inv) @ v.T
        q = (v * s) @ v.T
        zero = np.zeros(h * w)
        out = match_full_factors(xc, zero, qstar, q, zero)
    else:
        tr = cs.estimate(CovKind.FULL, FeatureMatrix(train.images.reshape(train.size, h * w)))
        te = cs.estimate(CovKind.FULL, FeatureMatrix(xc))
        q = sym_sqrt(tr.full)
        qstar = sym_invsqrt(te.full, scale_eps(te.full, eps))
        out = match_full_factors(xc, te.mean, qstar, q, tr.mean)

    return float(np.abs(out - xt).max() / np.abs(xt).max())


# ---------------------------------------------------------------------------
# Procedural digit glyphs (MNIST stand-in: 28x28, 10 classes, IDX-dumpable)
# ---------------------------------------------------------------------------

# Seven-segment layout: (x0, y0, x1, y1) in unit glyph coordinates, y down.
_SEG = {
    "A": (0.30, 0.18, 0.70, 0.18),
    "B": (0.70, 0.18, 0.70, 0.50),
    "C": (0.70, 0.50, 0.70, 0.82),
    "D": (0.30, 0.82, 0.70, 0.82),
    "E": (0.30, 0.50, 0.30, 0.82),
    "F": (0.30, 0.18, 0.30, 0.50),
    "G": (0.30, 0.50, 0.70, 0.50),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF", 1: "BC", 2: "ABGED", 3: "ABGCD", 4: "FGBC",
    5: "AFGCD", 6: "AFGEDC", 7: "ABC", 8: "ABCDEFG", 9: "ABCDFG",
}


def _render_glyph(digit: int, size: int, rot: float, scale: float, shear: float,
                  tx: float, ty: float, thick: float, fg: float) -> np.ndarray:
    """Rasterize one affine-jittered seven-segment digit on [0,1]^2."""
    cosr, sinr = np.cos(rot), np.sin(rot)
    m = np.array([[cosr, -sinr], [sinr, cosr]]) @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    center = np.array([0.5, 0.5])
    offset = np.array([tx, ty])

    ax = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(ax, ax, indexing="xy")
    img = np.zeros((size, size))
    aa = 1.0 / size  # ~one-pixel soft edge
    half = thick / 2.0
    for seg in _DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = _SEG[seg]
        a = m @ (np.array([x0, y0]) - center) + center + offset
        b = m @ (np.array([x1, y1]) - center) + center + offset
        d = b - a
        len2 = float(d @ d)
        if len2 < 1e-12:
            dist = np.hypot(px - a[0], py - a[1])
        else:
            t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / len2, 0.0, 1.0)
            dist = np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))
        img = np.maximum(img, np.clip((half - dist) / aa + 0.5, 0.0, 1.0))
    return img * fg


def synth_digits(p: int, seed: int, size: int = 28, classes: int = 10,
                 thick: tuple[float, float] = (0.03, 0.055),
                 scale: tuple[float, float] = (0.45, 0.85),
                 noise: float = 0.06) -> Dataset:
    """Deterministic glyph-digit dataset: affine-jittered thin strokes plus noise.

    Strokes are deliberately thin (~1 px) so that heavy blur genuinely
    destroys the high-frequency structure classifiers rely on.
    """
    if not 2 <= classes <= 10:
        raise SpecError(f"classes must be in 2..10, got {classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.repeat(np.arange(classes), (p + classes - 1) // classes)[:p]
    labels = rng.permuted(labels)
    images = np.empty((p, 1, size, size), dtype=np.float32)
    for i in range(p):
        glyph = _render_glyph(
            int(labels[i]), size,
            rot=rng.uniform(-0.22, 0.22),
            scale=rng.uniform(*scale),
            shear=rng.uniform(-0.25, 0.25),
            tx=rng.uniform(-0.08, 0.08),
            ty=rng.uniform(-0.08, 0.08),
            thick=rng.uniform(*thick),
            fg=rng.uniform(0.65, 1.0),
        )
        noisy = glyph + rng.normal(0.0, noise, glyph.shape)
        images[i, 0] = np.clip(noisy, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64))
