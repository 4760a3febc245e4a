"""Orthographic silhouette+depth rendering of voxel grids, plus PGM I/O.

View convention: the grid is rotated about its centre by `-azimuth` around
z (up) and then `-elevation` around y, and projected along +x.  Image rows
run top-to-bottom with +z up, columns left-to-right with +y right.  Channel
0 is the binary silhouette; channel 1 is depth, mapped so the nearest
possible surface is 1.0 and empty pixels are 0.  Resampling is nearest
neighbour, so rendering is exactly deterministic.
"""

from __future__ import annotations

import numpy as np

from .voxel import VoxelGrid


def _rotation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    rot_z = np.array([[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rot_y = np.array([[ce, 0.0, -se], [0.0, 1.0, 0.0], [se, 0.0, ce]])
    return rot_y @ rot_z


def rotate_grid(volume: VoxelGrid, azimuth: float, elevation: float) -> np.ndarray:
    """Nearest-neighbour resampled occupancy after the view rotation."""
    dim = volume.dim
    rot = _rotation(azimuth, elevation)
    c = (dim - 1) / 2.0
    coords = np.indices((dim, dim, dim), dtype=np.float64).reshape(3, -1)
    src = rot.T @ (coords - c) + c
    idx = np.rint(src).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < dim), axis=0)
    occ = volume.occupied()
    out = np.zeros(dim ** 3, dtype=bool)
    sel = idx[:, inside]
    out[inside] = occ[sel[0], sel[1], sel[2]]
    return out.reshape(dim, dim, dim)


def render(volume: VoxelGrid, azimuth: float, elevation: float,
           out_size: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Render a (2, H, W) float32 silhouette+depth image of `volume`."""
    if not 0.0 <= azimuth < 360.0:
        raise ValueError(f"azimuth must be in [0, 360), got {azimuth}")
    if not -45.0 <= elevation <= 45.0:
        raise ValueError(f"elevation must be in [-45, 45], got {elevation}")
    h, w = out_size
    if h <= 0 or w <= 0:
        raise ValueError(f"bad output size {out_size}")
    dim = volume.dim
    occ = rotate_grid(volume, azimuth, elevation)

    hits = occ.any(axis=0)                      # (y, z)
    first = np.argmax(occ, axis=0)              # first occupied voxel along +x
    depth = np.where(hits, (dim - first) / dim, 0.0)

    # (y, z) -> image with +z up, +y right.
    sil_img = hits.T[::-1, :]
    dep_img = depth.T[::-1, :]

    rows = (np.arange(h) * dim) // h
    cols = (np.arange(w) * dim) // w
    sil = sil_img[np.ix_(rows, cols)].astype(np.float32)
    dep = dep_img[np.ix_(rows, cols)].astype(np.float32)
    return np.stack([sil, dep])


# ---------------------------------------------------------------------------
# 8-bit binary PGM (P5)
# ---------------------------------------------------------------------------

def write_pgm(image: np.ndarray, path) -> None:
    """Write a single-channel [0,1] float image as an 8-bit binary PGM."""
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = quantized.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM back into a [0,1] float32 image."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return (raw.reshape(h, w).astype(np.float32)) / 255.0
