"""Binary-mask rasterization, exact Euclidean distance transforms, and IoU.

Rasterization samples at pixel centers (integer pixel coordinates, matching
the camera convention), fills the union of all projected triangles and drops
triangles with any vertex behind the camera.  The distance transform is the
exact two-pass squared-distance lower-envelope algorithm, so it matches a
brute-force nearest-set-pixel search bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, project


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool, row-major

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise ValueError(f"bits shape {bits.shape} != (height={self.height}, width={self.width})")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "BinaryMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(width=bits.shape[1], height=bits.shape[0], bits=bits)

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class DistanceField:
    width: int
    height: int
    values: np.ndarray  # (height, width) distance in pixels to nearest set pixel

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.height, self.width):
            raise ValueError("values shape mismatch")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def rasterize_silhouette(
    vertices: np.ndarray, faces: np.ndarray, camera: Camera, width: int, height: int
) -> BinaryMask:
    """Rasterize the projected mesh into a binary mask.

    A pixel is set when its center lies inside (or on the boundary of) at
    least one projected triangle.
    """
    if width <= 0 or height <= 0:
        raise ValueError("mask dimensions must be positive")
    uv, valid = project(camera, vertices)
    faces = np.asarray(faces, dtype=np.int64)
    bits = np.zeros((height, width), dtype=bool)
    if faces.size == 0:
        return BinaryMask(width, height, bits)
    ok = valid[faces].all(axis=1)
    for tri in faces[ok]:
        p0, p1, p2 = uv[tri]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if area == 0.0:
            continue
        us = np.array([p0[0], p1[0], p2[0]])
        vs = np.array([p0[1], p1[1], p2[1]])
        x0 = max(int(np.ceil(us.min())), 0)
        x1 = min(int(np.floor(us.max())), width - 1)
        y0 = max(int(np.ceil(vs.min())), 0)
        y1 = min(int(np.floor(vs.max())), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        s = np.sign(area)
        e0 = ((p1[0] - p0[0]) * (gy - p0[1]) - (p1[1] - p0[1]) * (gx - p0[0])) * s
        e1 = ((p2[0] - p1[0]) * (gy - p1[1]) - (p2[1] - p1[1]) * (gx - p1[0])) * s
        e2 = ((p0[0] - p2[0]) * (gy - p2[1]) - (p0[1] - p2[1]) * (gx - p2[0])) * s
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        bits[y0 : y1 + 1, x0 : x1 + 1] |= inside
    return BinaryMask(width, height, bits)


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """1D squared-distance transform d[p] = min_q (p-q)^2 + f[q]; inf allowed."""
    n = f.shape[0]
    d = np.full(n, np.inf)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return d
    v = np.empty(finite.size, dtype=np.int64)  # parabola sites
    z = np.empty(finite.size + 1)  # envelope boundaries
    k = 0
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    for q in finite[1:]:
        while True:
            vk = v[k]
            s = ((f[q] + q * q) - (f[vk] + vk * vk)) / (2.0 * (q - vk))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        vp = v[k]
        d[p] = (p - vp) * (p - vp) + f[vp]
    return d


def distance_transform(mask: BinaryMask) -> DistanceField:
    """Exact Euclidean distance (pixels) to the nearest set pixel.

    An all-unset mask yields a field of +inf.
    """
    bits = mask.bits
    h, w = bits.shape
    # pass 1: per column, run lengths give the exact vertical distance
    g = np.full((h, w), np.inf)
    run = np.full(w, np.inf)
    for i in range(h):
        run = np.where(bits[i], 0.0, run + 1.0)
        g[i] = run
    run = np.full(w, np.inf)
    for i in range(h - 1, -1, -1):
        run = np.where(bits[i], 0.0, run + 1.0)
        g[i] = np.minimum(g[i], run)
    with np.errstate(invalid="ignore"):
        g = np.where(np.isfinite(g), g * g, np.inf)
    # pass 2: per row, lower envelope over columns
    d2 = np.empty((h, w))
    for i in range(h):
        d2[i] = _envelope_1d(g[i])
    return DistanceField(mask.width, mask.height, np.sqrt(d2))


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError("mask dimensions differ")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


# ---------------------------------------------------------------------------
# PGM (P5) io: 0 = background, 255 = silhouette


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    payload = np.where(mask.bits, 255, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def load_mask(path: str | Path) -> BinaryMask:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        # token scanner that skips whitespace and '#' comments
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("expected maxval 255")
    pos += 1  # single whitespace after header
    pixels = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError("truncated PGM payload")
    return BinaryMask(width, height, (pixels >= 128).reshape(height, width))
