"""Raster primitives: Laplacian focus measure with the blur gate,
grayscale morphological opening, signed intensity rescaling, the
double-kernel matched filter, relative thresholding and half resizing.

GrayImage is a 2-D uint8 array (row-major, values 0..255); ScalarField
and Kernel are 2-D float64 arrays. All operations are pure functions.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_BLUR_ALPHA = 0.2
DEFAULT_OPEN_ITERATIONS = 3
MIN_DOUBLE_KERNEL_SIZE = 9


class ImagingError(ValueError):
    pass


def _check_gray(img: np.ndarray, min_side: int = 1) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImagingError("expected a 2-D uint8 image")
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ImagingError(f"image must be at least {min_side}x{min_side}")
    return img


@dataclass(frozen=True)
class FocusReport:
    """Sharpness verdict for one image: variance of the Laplacian against
    a threshold proportional to the mean intensity."""

    focus_measure: float
    mean_intensity: float
    threshold: float
    is_sharp: bool


def laplacian(img: np.ndarray) -> np.ndarray:
    """Sum of second derivatives, each obtained by running the 3x3 Sobel
    first-derivative kernel twice along its axis (edge-replicated borders).

    The Sobel smoothing wing is normalized to unit mass (kernel / 4), which
    keeps the blur-gate threshold alpha * mean-intensity on the same scale
    as the measure; values are exact dyadic rationals in float64, matching
    a dense double-convolution oracle bit for bit.
    """
    img = _check_gray(img, min_side=3)
    f = img.astype(np.float64)
    dxx = _kernels.sobel_pass(_kernels.sobel_pass(f, True), True)
    dyy = _kernels.sobel_pass(_kernels.sobel_pass(f, False), False)
    return dxx + dyy


def focus_measure(img: np.ndarray, alpha: float = DEFAULT_BLUR_ALPHA) -> FocusReport:
    """Blur gate: population variance of the Laplacian versus alpha times
    the mean raw intensity. Sharp means focus_measure strictly above the
    threshold."""
    lap = laplacian(img)
    fm = float(np.var(lap))
    mean_i = float(np.mean(img))
    threshold = alpha * mean_i
    return FocusReport(
        focus_measure=fm,
        mean_intensity=mean_i,
        threshold=threshold,
        is_sharp=fm > threshold,
    )


def disc_offsets(radius: int):
    """Offsets (dy, dx) of a disc-shaped structuring element."""
    if radius < 1:
        raise ImagingError("radius must be >= 1")
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= r * r
    return dy[keep].astype(np.int64), dx[keep].astype(np.int64)


def morphological_open(
    img: np.ndarray, radius: int, iterations: int = DEFAULT_OPEN_ITERATIONS
) -> np.ndarray:
    """Grayscale opening (min filter then max filter) with a disc element,
    repeated ``iterations`` times. Out-of-image neighbours are ignored."""
    img = _check_gray(img)
    dy, dx = disc_offsets(radius)
    out = img
    for _ in range(int(iterations)):
        out = _kernels.dilate_offsets(_kernels.erode_offsets(out, dy, dx), dy, dx)
    return out


def rescale_signed(img: np.ndarray) -> np.ndarray:
    """Map intensities so black is -0.5 and white is +0.5."""
    img = _check_gray(img)
    return img.astype(np.float64) / 255.0 - 0.5


def make_double_kernel(size_px: int) -> np.ndarray:
    """Concentric matched filter for an opened code blob: a dark disc
    (weight -0.5, diameter 0.6*size) inside a white annulus (weight +0.5,
    diameters 0.75*size to size), with a don't-care gap ring between.

    On a signed-rescaled image the response is maximal where a dark blob
    sits on a white surround, so downstream thresholding keeps maxima.
    """
    size = int(size_px)
    if size < MIN_DOUBLE_KERNEL_SIZE:
        raise ImagingError(f"kernel size must be >= {MIN_DOUBLE_KERNEL_SIZE}")
    if size % 2 == 0:
        raise ImagingError("kernel size must be odd")
    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    r = np.hypot(ys - half, xs - half)
    weights = np.zeros((size, size))
    weights[r <= 0.3 * size] = -0.5
    weights[(r >= 0.375 * size) & (r <= 0.5 * size)] = 0.5
    return weights


def correlate(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Dense cross-correlation over the valid region; the half-kernel
    border is set to -inf so it never wins a maximum search."""
    field = np.ascontiguousarray(field, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if field.ndim != 2 or kernel.ndim != 2:
        raise ImagingError("field and kernel must be 2-D")
    if field.shape[0] < kernel.shape[0] or field.shape[1] < kernel.shape[1]:
        raise ImagingError("field smaller than kernel")
    return _kernels.correlate_valid(field, kernel)


def threshold_relative(field: np.ndarray, factor: float) -> np.ndarray:
    """Binary mask of values >= factor * global maximum (255 inside).
    A non-positive maximum yields an empty mask."""
    if not 0.0 < factor <= 1.0:
        raise ImagingError("factor must be in (0, 1]")
    field = np.asarray(field, dtype=np.float64)
    peak = float(np.max(field)) if field.size else 0.0
    mask = np.zeros(field.shape, np.uint8)
    if peak <= 0.0:
        return mask
    mask[field >= factor * peak] = 255
    return mask


def resize_half(img: np.ndarray) -> np.ndarray:
    """2x2 box-filter downsample; odd trailing rows/columns are dropped.
    Box means are rounded half-up (127.5 -> 128)."""
    img = _check_gray(img, min_side=2)
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    a = img[: 2 * h2, : 2 * w2].astype(np.uint32)
    s = a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]
    return ((s + 2) // 4).astype(np.uint8)


# ---------------------------------------------------------------------------
# binary PGM (P5) image files


def write_pgm(path, img: np.ndarray) -> None:
    img = _check_gray(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ImagingError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ImagingError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    if pixels.size != w * h:
        raise ImagingError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()
