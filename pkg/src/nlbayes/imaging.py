"""Image I/O, patch decomposition, synthetic corruption, and quality metrics.

Images are held as float64 arrays shaped (channels, height, width) with
intensities normalized to [0, 1] on load.  Two on-disk formats are supported:

* binary PGM ("P5", 8- or 16-bit, 16-bit samples big-endian), and
* a raw float container: magic ``NLBF1\\n``, an ASCII line
  ``width height channels\\n``, then width*height*channels little-endian
  float32 values, row-major within each channel, channels consecutive.

PGM values are divided by the stated maxval; raw float values are loaded
verbatim (so out-of-range intermediates survive a round trip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CoverageError, FormatError

NLBF_MAGIC = b"NLBF1\n"

# Fixed structural-similarity parameters: 11x11 Gaussian window with
# sigma 1.5, K1=0.01, K2=0.03, dynamic range 1.0.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class Image:
    """A (channels, height, width) stack of float64 intensity planes."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ValueError(f"image data must be 2-D or 3-D, got shape {arr.shape}")
        self.data = arr

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[c]


@dataclass
class PatchGrid:
    """Vectorized square windows of one image plane plus their anchors.

    Anchors are the full cartesian product of ``rows`` x ``cols`` in
    row-major scan order, so index arithmetic is ``divmod(i, len(cols))``.
    """

    patches: np.ndarray  # (n, side*side)
    anchors: np.ndarray  # (n, 2) int64, (row, col) top-left corners
    side: int
    height: int
    width: int
    rows: np.ndarray  # sorted unique anchor rows
    cols: np.ndarray  # sorted unique anchor cols

    def __len__(self) -> int:
        return self.patches.shape[0]


def _pgm_header(buf: bytes):
    """Parse the three ASCII header fields of a P5 file.

    Returns (width, height, maxval, payload_offset).  Comments starting
    with '#' are skipped, and exactly one whitespace byte separates the
    maxval from the payload.
    """
    fields = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError as exc:
            raise FormatError(f"bad PGM header token {buf[start:pos]!r}") from exc
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM maxval")
    return fields[0], fields[1], fields[2], pos + 1


def _load_pgm(buf: bytes) -> Image:
    width, height, maxval, offset = _pgm_header(buf)
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(f"bad PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = buf[offset : offset + need]
    if len(payload) != need:
        raise FormatError(
            f"payload mismatch: expected {need} bytes, found {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return Image(raw.reshape(1, height, width) / float(maxval))


def _load_nlbf(buf: bytes) -> Image:
    end = buf.find(b"\n", len(NLBF_MAGIC))
    if end < 0:
        raise FormatError("truncated NLBF header")
    parts = buf[len(NLBF_MAGIC) : end].split()
    if len(parts) != 3:
        raise FormatError("NLBF header must be 'width height channels'")
    try:
        width, height, channels = (int(p) for p in parts)
    except ValueError as exc:
        raise FormatError("bad NLBF header") from exc
    if width <= 0 or height <= 0 or channels <= 0:
        raise FormatError(f"bad NLBF dimensions {width}x{height}x{channels}")
    need = width * height * channels * 4
    payload = buf[end + 1 : end + 1 + need]
    if len(payload) != need:
        raise FormatError(
            f"payload mismatch: expected {need} bytes, found {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.isfinite(raw).all():
        raise FormatError("NLBF payload contains non-finite values")
    return Image(raw.reshape(channels, height, width))


def load_image(path) -> Image:
    """Load a PGM (P5) or NLBF image, normalizing PGM samples to [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"P5":
        return _load_pgm(buf)
    if buf[: len(NLBF_MAGIC)] == NLBF_MAGIC:
        return _load_nlbf(buf)
    raise FormatError(f"unsupported magic number in {path}")


def save_image(img: Image, path) -> None:
    """Write ``img`` to ``path``; the format is chosen by file extension.

    ``.pgm`` clamps to [0, 1] and quantizes round-half-up to maxval 255
    (single channel only); ``.nlbf`` stores float32 values verbatim.
    """
    name = str(path).lower()
    if name.endswith(".pgm"):
        if img.channels != 1:
            raise FormatError("PGM output supports a single channel")
        clamped = np.clip(img.plane(0), 0.0, 1.0)
        quant = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
        header = f"P5\n{img.width} {img.height}\n255\n".encode()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(quant.tobytes())
        return
    if name.endswith(".nlbf"):
        header = f"{img.width} {img.height} {img.channels}\n".encode()
        with open(path, "wb") as fh:
            fh.write(NLBF_MAGIC)
            fh.write(header)
            fh.write(img.data.astype("<f4").tobytes())
        return
    raise FormatError(f"unsupported output format for {path} (use .pgm or .nlbf)")


def _anchor_positions(extent: int, side: int, stride: int) -> np.ndarray:
    # Regular stride positions plus the clamped final anchor so every
    # pixel is covered without padding.
    pos = list(range(0, extent - side + 1, stride))
    if pos[-1] != extent - side:
        pos.append(extent - side)
    return np.asarray(pos, dtype=np.int64)


def extract_patches(img, side: int, stride: int = 1) -> PatchGrid:
    """Decompose a single-channel image into vectorized square patches.

    Accepts an :class:`Image` (one channel) or a 2-D array.  Anchors sit at
    multiples of ``stride`` with the last row/column clamped to the border.
    """
    if isinstance(img, Image):
        if img.channels != 1:
            raise ValueError("extract_patches expects a single channel; iterate channels")
        plane = img.plane(0)
    else:
        plane = np.asarray(img, dtype=np.float64)
        if plane.ndim != 2:
            raise ValueError("extract_patches expects a 2-D plane")
    height, width = plane.shape
    if side < 1 or side > min(height, width):
        raise ValueError(f"patch side {side} out of range for {height}x{width} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = _anchor_positions(height, side, stride)
    cols = _anchor_positions(width, side, stride)
    wins = sliding_window_view(plane, (side, side))
    sub = wins[np.ix_(rows, cols)]  # (nr, nc, side, side)
    patches = np.ascontiguousarray(sub).reshape(len(rows) * len(cols), side * side)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    anchors = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return PatchGrid(patches, anchors, side, height, width, rows, cols)


def reconstruct_dense(grid: PatchGrid, denoised) -> Image:
    """Average overlapping patches back into an image.

    ``denoised`` must align 1:1 with ``grid.anchors``.  Accumulation runs in
    anchor scan order so the result is bit-reproducible; every output pixel
    is the mean of all patch values covering it.
    """
    values = np.asarray(denoised, dtype=np.float64)
    if values.shape != grid.patches.shape:
        raise ValueError(
            f"denoised patches shape {values.shape} does not match grid {grid.patches.shape}"
        )
    side = grid.side
    acc = np.zeros((grid.height, grid.width))
    cnt = np.zeros((grid.height, grid.width))
    for i in range(len(grid)):
        r, c = grid.anchors[i]
        acc[r : r + side, c : c + side] += values[i].reshape(side, side)
        cnt[r : r + side, c : c + side] += 1.0
    if (cnt == 0).any():
        raise CoverageError("some pixels are covered by no patch")
    return Image(acc / cnt)


def poisson_gaussian_corrupt(img: Image, beta: float, sigma: float, seed: int) -> Image:
    """Add heteroscedastic Gaussian noise with variance beta^2 * x + sigma^2.

    The draw is deterministic for a given seed.  Values are not clamped;
    clamping happens only when saving to a quantized format.
    """
    if beta < 0 or sigma < 0:
        raise ValueError("noise parameters must be non-negative")
    rng = np.random.default_rng(seed)
    x = img.data
    # max() guards re-corruption of images whose values dipped below zero
    std = np.sqrt(np.maximum(beta * beta * x, 0.0) + sigma * sigma)
    return Image(x + rng.standard_normal(x.shape) * std)


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0.

    Identical images give ``inf``.  Multi-channel inputs return the mean of
    the per-channel ratios.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")
    out = []
    for c in range(a.channels):
        mse = float(np.mean((a.plane(c) - b.plane(c)) ** 2))
        out.append(math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse))
    return float(np.mean(out))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    k = _SSIM_KERNEL
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    wx = sliding_window_view(x, k.shape)
    wy = sliding_window_view(y, k.shape)
    mu_x = np.einsum("ijkl,kl->ij", wx, k)
    mu_y = np.einsum("ijkl,kl->ij", wy, k)
    ex2 = np.einsum("ijkl,kl->ij", wx * wx, k)
    ey2 = np.einsum("ijkl,kl->ij", wy * wy, k)
    exy = np.einsum("ijkl,kl->ij", wx * wy, k)
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a: Image, b: Image) -> float:
    """Mean local structural similarity over valid window positions.

    Uses the fixed window parameters above (weighted window statistics,
    no unbiased correction).  Channels are windowed separately and the
    per-channel scores averaged.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_plane(a.plane(c), b.plane(c)) for c in range(a.channels)]))
