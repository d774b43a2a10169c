"""Binary silhouette masks: PGM I/O, boundary extraction, rasterization and IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import Mesh
from .camera import MIN_DEPTH, CameraParams, to_camera_frame


class MaskFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SilhouetteMask:
    bits: np.ndarray  # (height, width) bool, row-major

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError("mask bits must be a 2D array")
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def empty(cls, width: int, height: int) -> "SilhouetteMask":
        return cls(np.zeros((height, width), dtype=bool))


def _header_fields(data: bytes) -> tuple[list[int], int]:
    if not data.startswith(b"P5"):
        raise MaskFormatError("not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                if end < 0:
                    raise MaskFormatError("unterminated header comment")
                pos = end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MaskFormatError("malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MaskFormatError("malformed PGM header")
    return fields, pos + 1


def load_mask(data: bytes) -> SilhouetteMask:
    """Parse an 8-bit binary PGM; pixels >= 128 are foreground."""
    (width, height, maxval), offset = _header_fields(data)
    if width <= 0 or height <= 0:
        raise MaskFormatError(f"invalid PGM size {width}x{height}")
    if maxval != 255:
        raise MaskFormatError(f"only maxval 255 is supported, got {maxval}")
    payload = data[offset : offset + width * height]
    if len(payload) < width * height:
        raise MaskFormatError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return SilhouetteMask(values >= 128)


def save_mask(mask: SilhouetteMask) -> bytes:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
    return header + (mask.bits.astype(np.uint8) * 255).tobytes()


def boundary_pixels(mask: SilhouetteMask) -> np.ndarray:
    """Boolean image of foreground pixels with a background 4-neighbor (the
    image border counts as background)."""
    b = np.pad(mask.bits, 1, constant_values=False)
    inner = b[1:-1, :-2] & b[1:-1, 2:] & b[:-2, 1:-1] & b[2:, 1:-1]
    return mask.bits & ~inner


def boundary_points(mask: SilhouetteMask) -> np.ndarray:
    """Pixel centers ``(u + 0.5, v + 0.5)`` of the boundary pixels, in raster order."""
    rows, cols = np.nonzero(boundary_pixels(mask))
    return np.column_stack([cols + 0.5, rows + 0.5]).astype(float)


def boundary_edge_points(mask: SilhouetteMask) -> tuple[np.ndarray, np.ndarray]:
    """Boundary pixel centers and matching sub-pixel contour estimates.

    The estimate moves each center half a pixel toward the mean of its
    background 4-neighbors, i.e. onto the pixel edge that separates foreground
    from background. Rows correspond to :func:`boundary_points`.
    """
    b = np.pad(mask.bits, 1, constant_values=False)
    rows, cols = np.nonzero(boundary_pixels(mask))
    r, c = rows + 1, cols + 1
    du = (~b[r, c + 1]).astype(float) - (~b[r, c - 1]).astype(float)
    dv = (~b[r + 1, c]).astype(float) - (~b[r - 1, c]).astype(float)
    count = (~b[r, c + 1]).astype(float) + (~b[r, c - 1]) + (~b[r + 1, c]) + (~b[r - 1, c])
    centers = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
    step = np.column_stack([du, dv]) / count[:, None]
    return centers, centers + 0.5 * step


def boundary_crossings(mask: SilhouetteMask) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints between every foreground pixel center and each background
    4-neighbor, with the foreground pixel center for each.

    The midpoints sample the half-coverage contour; a pixel with two
    background neighbors yields two rows. Rows are in raster order of the
    foreground pixel, then right, left, down, up.
    """
    b = np.pad(mask.bits, 1, constant_values=False)
    rows, cols = np.nonzero(boundary_pixels(mask))
    r, c = rows + 1, cols + 1
    centers = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    open_ = np.column_stack([~b[r + dv, c + du] for du, dv in steps])
    pix, side = np.nonzero(open_)
    offset = 0.5 * np.array(steps, dtype=float)[side]
    return centers[pix], centers[pix] + offset


def iou(a: SilhouetteMask, b: SilhouetteMask) -> float:
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"mask sizes differ: {a.bits.shape} vs {b.bits.shape}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray  # (height, width), +inf on background

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


_CHUNK = 2_000_000


def rasterize_silhouette(mesh: Mesh, camera: CameraParams) -> tuple[SilhouetteMask, DepthMap]:
    """Render mesh coverage and nearest camera-space depth at pixel centers.

    Both front- and back-facing triangles count. Pixels exactly on a shared
    edge follow the top-left rule. Triangles with a vertex at or behind the
    camera plane are skipped.
    """
    w, h = camera.image_size
    depth = np.full(h * w, np.inf)
    pc = to_camera_frame(camera, mesh.vertices)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    z = pc[:, 2]
    ok = np.all(z[faces] > MIN_DEPTH, axis=1)
    faces = faces[ok]
    tri_ids = np.flatnonzero(ok)
    if len(faces) == 0:
        return SilhouetteMask(np.zeros((h, w), bool)), DepthMap(depth.reshape(h, w))
    zs = np.where(z > MIN_DEPTH, z, 1.0)
    uv = camera.focal * pc[:, :2] / zs[:, None] + camera.principal_point
    p = uv[faces]  # (T, 3, 2)
    inv_z = 1.0 / zs[faces]  # (T, 3)
    # orient every triangle to positive signed area
    area = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    keep = area != 0
    p, inv_z, area, tri_ids = p[keep], inv_z[keep], area[keep], tri_ids[keep]
    flip = area < 0
    p[flip] = p[flip][:, [0, 2, 1]]
    inv_z[flip] = inv_z[flip][:, [0, 2, 1]]
    area = np.abs(area)

    x0 = np.clip(np.ceil(p[..., 0].min(axis=1) - 0.5), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(p[..., 0].max(axis=1) - 0.5), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(p[..., 1].min(axis=1) - 0.5), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(p[..., 1].max(axis=1) - 0.5), -1, h - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    live = np.flatnonzero(counts > 0)

    # top-left rule per edge (edge i runs from vertex i to vertex i+1)
    e_from = p
    e_to = p[:, [1, 2, 0]]
    ex = e_to[..., 0] - e_from[..., 0]
    ey = e_to[..., 1] - e_from[..., 1]
    # with positive signed area in the y-down frame, top edges are horizontal
    # with ex > 0 and left edges run upward (ey < 0)
    top_left = ((ey == 0) & (ex > 0)) | (ey < 0)

    best = np.full(h * w, np.inf)
    best_tri = np.full(h * w, np.iinfo(np.int64).max)
    start = 0
    while start < len(live):
        csum = np.cumsum(counts[live[start:]])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK, side="right")))
        sel = live[start:stop]
        start = stop
        n = counts[sel]
        t = np.repeat(sel, n)
        local = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        px = x0[t] + local % nx[t]
        py = y0[t] + local // nx[t]
        cx = px + 0.5
        cy = py + 0.5
        inside = np.ones(len(t), dtype=bool)
        bary = np.empty((len(t), 3))
        for i in range(3):
            # edge function, positive on the inside
            e = ex[t, i] * (cy - e_from[t, i, 1]) - ey[t, i] * (cx - e_from[t, i, 0])
            inside &= (e > 0) | ((e == 0) & top_left[t, i])
            bary[:, (i + 2) % 3] = e
        t, px, py, bary = t[inside], px[inside], py[inside], bary[inside]
        bary /= area[t][:, None]
        # perspective-correct depth from interpolated inverse depth
        d = 1.0 / np.einsum("ij,ij->i", bary, inv_z[t])
        pix = py * w + px
        order = np.lexsort((tri_ids[t], d, pix))
        pix, d, tt = pix[order], d[order], tri_ids[t][order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, d, tt = pix[first], d[first], tt[first]
        better = (d < best[pix]) | ((d == best[pix]) & (tt < best_tri[pix]))
        best[pix[better]] = d[better]
        best_tri[pix[better]] = tt[better]
    depth = best.reshape(h, w)
    return SilhouetteMask(np.isfinite(depth)), DepthMap(depth)
