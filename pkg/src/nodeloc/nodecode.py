"""Identity codes carried on the node corners: a 10x10 cell matrix with an
L-shaped finder (two adjacent solid dark sides), timing borders on the two
opposite sides, and a CRC-8 protected payload of node id plus corner index.

Matrix layout (canonical orientation, row 0 at top):

* column 0 solid dark, row 9 solid dark (the L finder),
* row 0 alternating starting dark at column 0, column 9 alternating
  starting light at row 0,
* the interior 8x8 = 64 cells hold, row-major MSB first: 16 node-id bits,
  2 corner bits, the 8 CRC bits, then 38 alternating padding bits.

The CRC is CRC-8 (polynomial 0x07, init 0x00, MSB first) over the 18 data
bits left-padded with zeros to 3 bytes. Decoding validates finder, timing,
padding and CRC, so a corrupted symbol is rejected rather than misread.
"""

import time
from dataclasses import dataclass

import numpy as np

GRID_CELLS = 10
ID_BITS = 16
CORNER_BITS = 2
CRC_BITS = 8
PAD_BITS = 64 - ID_BITS - CORNER_BITS - CRC_BITS
DEFAULT_TIME_BUDGET_MS = 50.0


class DecodeError(ValueError):
    pass


class DecodeTimeoutError(DecodeError):
    """The per-ROI time budget elapsed before any candidate decoded."""


class NoValidCodeError(DecodeError):
    """Every candidate failed the finder/timing/padding/CRC checks."""


@dataclass(frozen=True)
class CodePayload:
    node_id: int
    corner_index: int

    def __post_init__(self):
        if not 0 <= self.node_id <= 0xFFFF:
            raise ValueError("node_id must be in [0, 65535]")
        if not 0 <= self.corner_index <= 3:
            raise ValueError("corner_index must be in {0, 1, 2, 3}")


@dataclass(frozen=True)
class DecodeResult:
    payload: CodePayload
    orientation_quadrant: int  # CCW quarter turns from sampled grid to canonical
    corner_of_node: int
    quad_index: int = 0  # which candidate quad produced the result


def crc8(data: bytes) -> int:
    crc = 0x00
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc


def _payload_bytes(payload: CodePayload) -> bytes:
    # 6 zero bits ++ 16 id bits ++ 2 corner bits, MSB first
    word = (payload.node_id << 2) | payload.corner_index
    return bytes([(word >> 16) & 0xFF, (word >> 8) & 0xFF, word & 0xFF])


def encode(payload: CodePayload) -> np.ndarray:
    """Render a payload into the 10x10 boolean cell matrix (True = dark)."""
    bits = []
    for i in range(ID_BITS - 1, -1, -1):
        bits.append((payload.node_id >> i) & 1)
    for i in range(CORNER_BITS - 1, -1, -1):
        bits.append((payload.corner_index >> i) & 1)
    crc = crc8(_payload_bytes(payload))
    for i in range(CRC_BITS - 1, -1, -1):
        bits.append((crc >> i) & 1)
    for i in range(PAD_BITS):
        bits.append(1 - (i & 1))  # alternating, starting dark

    m = np.zeros((GRID_CELLS, GRID_CELLS), dtype=bool)
    m[:, 0] = True
    m[GRID_CELLS - 1, :] = True
    for j in range(GRID_CELLS):
        m[0, j] = j % 2 == 0
    for i in range(GRID_CELLS):
        m[i, GRID_CELLS - 1] = i % 2 == 1
    interior = np.array(bits, dtype=bool).reshape(8, 8)
    m[1:9, 1:9] = interior
    return m


def _pattern_valid(m: np.ndarray) -> bool:
    if not m[:, 0].all():
        return False
    if not m[GRID_CELLS - 1, :].all():
        return False
    for j in range(GRID_CELLS):
        if bool(m[0, j]) != (j % 2 == 0):
            return False
    for i in range(GRID_CELLS):
        if bool(m[i, GRID_CELLS - 1]) != (i % 2 == 1):
            return False
    return True


def _decode_canonical(m: np.ndarray):
    bits = m[1:9, 1:9].astype(np.int64).ravel()
    node_id = 0
    for b in bits[:ID_BITS]:
        node_id = (node_id << 1) | int(b)
    corner = 0
    for b in bits[ID_BITS : ID_BITS + CORNER_BITS]:
        corner = (corner << 1) | int(b)
    crc_read = 0
    for b in bits[ID_BITS + CORNER_BITS : ID_BITS + CORNER_BITS + CRC_BITS]:
        crc_read = (crc_read << 1) | int(b)
    pad = bits[ID_BITS + CORNER_BITS + CRC_BITS :]
    for i, b in enumerate(pad):
        if int(b) != 1 - (i & 1):
            return None
    payload = CodePayload(node_id=node_id, corner_index=corner)
    if crc8(_payload_bytes(payload)) != crc_read:
        return None
    return payload


def decode_matrix(m: np.ndarray):
    """Try the four rotations of a sampled cell grid; returns
    (payload, quadrant) or None. The finder pattern makes at most one
    rotation valid."""
    m = np.asarray(m, dtype=bool)
    if m.shape != (GRID_CELLS, GRID_CELLS):
        raise DecodeError("expected a 10x10 cell matrix")
    for rot in range(4):
        mr = np.rot90(m, rot)
        if _pattern_valid(mr):
            payload = _decode_canonical(mr)
            if payload is not None:
                return payload, rot
    return None


# ---------------------------------------------------------------------------
# perspective sampling from an ROI


def homography_unit_square(quad: np.ndarray) -> np.ndarray:
    """Homography mapping the unit square (0,0)-(1,0)-(1,1)-(0,1) onto the
    four quad points (same order)."""
    quad = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    a = []
    b = []
    for (x, y), (u, v) in zip(src, quad):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        b.append(u)
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.append(v)
    h = np.linalg.solve(np.array(a), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def sample_cells(roi: np.ndarray, quad: np.ndarray):
    """Mean of a 3x3 pixel cluster at each cell center, mapped through the
    quad homography. Returns (10, 10) means plus the flat sample pool used
    for thresholding."""
    h_mat = homography_unit_square(quad)
    hgt, wid = roi.shape
    means = np.empty((GRID_CELLS, GRID_CELLS))
    pool = []
    f = roi.astype(np.float64)
    for i in range(GRID_CELLS):
        for j in range(GRID_CELLS):
            u = (j + 0.5) / GRID_CELLS
            v = (i + 0.5) / GRID_CELLS
            p = h_mat @ np.array([u, v, 1.0])
            x = p[0] / p[2]
            y = p[1] / p[2]
            px = int(round(x))
            py = int(round(y))
            x0, x1 = max(0, px - 1), min(wid, px + 2)
            y0, y1 = max(0, py - 1), min(hgt, py + 2)
            if x0 >= x1 or y0 >= y1:
                means[i, j] = 255.0
                continue
            patch = f[y0:y1, x0:x1]
            means[i, j] = float(patch.mean())
            pool.append(patch.ravel())
    flat = np.concatenate(pool) if pool else np.zeros(0)
    return means, flat


def otsu_threshold(values: np.ndarray) -> float:
    """Classic two-class threshold maximizing between-class variance over a
    256-bin histogram; returns the class boundary as t + 0.5."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 255).astype(np.int64)
    hist = np.bincount(v, minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        return 127.5
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * levels)
    mean_total = sum0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (mean_total - sum0) / w1
        variance = w0 * w1 * (mu0 - mu1) ** 2
    variance[~np.isfinite(variance)] = -1.0
    return float(np.argmax(variance)) + 0.5


def decode_roi(
    roi: np.ndarray,
    candidate_quads,
    time_budget_ms: float = DEFAULT_TIME_BUDGET_MS,
    clock=time.perf_counter,
) -> DecodeResult:
    """Try to decode one of the candidate quads (each a 4x2 pixel
    quadrilateral in ROI coordinates). Cells are binarized against the Otsu
    threshold of the sampled pool; the first quad whose grid validates wins.

    Raises DecodeTimeoutError when the budget elapses and NoValidCodeError
    when every candidate fails.
    """
    roi = np.asarray(roi)
    if roi.ndim != 2 or roi.dtype != np.uint8:
        raise DecodeError("expected a 2-D uint8 ROI")
    start = clock()
    budget_s = float(time_budget_ms) / 1000.0
    for quad_index, quad in enumerate(candidate_quads):
        if clock() - start >= budget_s:
            raise DecodeTimeoutError(f"decode budget of {time_budget_ms} ms elapsed")
        means, pool = sample_cells(roi, quad)
        if pool.size == 0:
            continue
        thr = otsu_threshold(pool)
        cells = means < thr
        hit = decode_matrix(cells)
        if hit is not None:
            payload, quadrant = hit
            return DecodeResult(
                payload=payload,
                orientation_quadrant=quadrant,
                corner_of_node=payload.corner_index,
                quad_index=quad_index,
            )
    if clock() - start >= budget_s:
        raise DecodeTimeoutError(f"decode budget of {time_budget_ms} ms elapsed")
    raise NoValidCodeError("no candidate quad produced a valid code")
