"""Frequency-domain view of RGB images and average-spectrum analysis."""

from __future__ import annotations

import io
import warnings
from pathlib import Path

import numpy as np

from .imgdata import _header_tokens, atomic_write_bytes, atomic_write_text, round_half_away

LOG_EPS = 1e-8


def dft2_per_channel(img: np.ndarray) -> np.ndarray:
    """Unnormalised forward 2-D DFT of each colour channel, ``(H, W, C)`` complex."""
    return np.fft.fft2(np.asarray(img, dtype=np.float64), axes=(0, 1))


def log_spectrum(spec: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.log(np.abs(spec) + eps)


def normalize_sym(x: np.ndarray) -> np.ndarray:
    """Min-max map each channel (last axis) of one image to ``[-1, 1]``.

    Flat channels (range below 1e-12) map to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=(0, 1), keepdims=True)
    hi = x.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    flat = span < 1e-12
    y = 2.0 * (x - lo) / np.where(flat, 1.0, span) - 1.0
    return np.where(flat, 0.0, y)


def fft_shift(x: np.ndarray) -> np.ndarray:
    """Swap quadrants so bin (0, 0) lands at (H/2, W/2). Even sizes only."""
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"fft_shift needs even dimensions, got {h}x{w}")
    return np.roll(x, (h // 2, w // 2), axis=(0, 1))


def to_freq_input(img: np.ndarray) -> np.ndarray:
    return fft_shift(normalize_sym(log_spectrum(dft2_per_channel(img))))


def to_freq_batch(images: np.ndarray) -> np.ndarray:
    """``to_freq_input`` over a ``(N, H, W, C)`` batch."""
    images = np.asarray(images, dtype=np.float64)
    logmag = np.log(np.abs(np.fft.fft2(images, axes=(1, 2))) + LOG_EPS)
    lo = logmag.min(axis=(1, 2), keepdims=True)
    hi = logmag.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span < 1e-12
    y = np.where(flat, 0.0, 2.0 * (logmag - lo) / np.where(flat, 1.0, span) - 1.0)
    h, w = images.shape[1:3]
    if h % 2 or w % 2:
        raise ValueError(f"fft_shift needs even dimensions, got {h}x{w}")
    return np.roll(y, (h // 2, w // 2), axis=(1, 2))


def median_filter(img: np.ndarray, k: int = 3) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel size must be odd, got {k}")
    r = k // 2
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, ((r, r), (r, r)) + ((0, 0),) * (img.ndim - 2), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.median(windows.reshape(windows.shape[: img.ndim] + (k * k,)), axis=-1)


def highpass_median(img: np.ndarray, k: int = 3) -> np.ndarray:
    """Residual after removing a ``k x k`` median blur."""
    return np.asarray(img, dtype=np.float64) - median_filter(img, k)


def average_spectrum(
    images,
    sample_n: int | None = None,
    seed: int = 0,
    highpass: bool = True,
    k: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean shifted log-magnitude spectrum over a random subset of ``images``.

    ``images`` is a sequence (or array) of ``(H, W, 3)`` images in ``[0, 1]``;
    uint8 input is rescaled. Returns the ``(H, W, 3)`` average and an 8-bit
    display image of the channel mean, min-max scaled.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot average the spectrum of an empty dataset")
    if sample_n is None:
        sample_n = min(1000, n)
    if sample_n < 1:
        raise ValueError("sample_n must be at least 1")
    if sample_n > n:
        warnings.warn(f"sample size {sample_n} exceeds dataset size {n}; using {n}", stacklevel=2)
        sample_n = n
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = np.sort(rng.choice(n, size=sample_n, replace=False))

    total = None
    for i in chosen:
        img = images[i]
        img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else np.asarray(img, dtype=np.float64)
        if highpass:
            img = highpass_median(img, k)
        spec = fft_shift(log_spectrum(dft2_per_channel(img)))
        total = spec if total is None else total + spec
    avg = total / sample_n
    return avg, display_image(avg)


def display_image(avg: np.ndarray) -> np.ndarray:
    mean = avg.mean(axis=2)
    lo, hi = mean.min(), mean.max()
    if hi - lo < 1e-12:
        return np.zeros(mean.shape, dtype=np.uint8)
    return round_half_away(255.0 * (mean - lo) / (hi - lo)).astype(np.uint8)


def _cyclic_dist(size: int, centre: int) -> np.ndarray:
    idx = np.arange(size)
    d = np.abs(idx - centre)
    return np.minimum(d, size - d)


def nyquist_band_mask(size: int, width: int = 2, reach: int = 4) -> np.ndarray:
    """Bins where upsampling replicas of the baseband land, shifted layout.

    A bin is in the band when it lies within ``width`` of a Nyquist line
    (shifted index 0) and within ``reach`` of the orthogonal zero-frequency
    axis (shifted index ``size // 2``).
    """
    near_nyq = _cyclic_dist(size, 0) <= width
    near_dc = _cyclic_dist(size, size // 2) <= reach
    return (near_nyq[:, None] & near_dc[None, :]) | (near_dc[:, None] & near_nyq[None, :])


def lowfreq_mask(size: int, reach: int = 4) -> np.ndarray:
    near_dc = _cyclic_dist(size, size // 2) <= reach
    return near_dc[:, None] & near_dc[None, :]


def nyquist_margin(avg: np.ndarray, width: int = 2, reach: int = 4) -> float:
    """Band mean minus the mean of all bins outside the band and the low-frequency core."""
    plane = avg.mean(axis=2) if avg.ndim == 3 else avg
    size = plane.shape[0]
    band = nyquist_band_mask(size, width, reach)
    background = ~band & ~lowfreq_mask(size, reach)
    return float(plane[band].mean() - plane[background].mean())


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def write_pgm(gray: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_pgm(gray))


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary P5 file")
    tokens, offset = _header_tokens(buf)
    w, h = int(tokens[1]), int(tokens[2])
    data = buf[offset : offset + w * h]
    if len(data) < w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_channel_csvs(avg: np.ndarray, path) -> list[Path]:
    """Write each channel as row-major CSV, ``<stem>.c<k><suffix>``."""
    path = Path(path)
    written = []
    for c in range(avg.shape[2]):
        buf = io.StringIO()
        for row in avg[:, :, c]:
            buf.write(",".join(repr(float(v)) for v in row))
            buf.write("\n")
        target = path.with_name(f"{path.stem}.c{c}{path.suffix or '.csv'}")
        atomic_write_text(target, buf.getvalue())
        written.append(target)
    return written
