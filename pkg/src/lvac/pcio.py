"""Voxelized point cloud I/O: PLY read/write, synthetic generators, colorspace.

A cloud is a set of occupied voxels on a ``2^depth`` cubic grid, each carrying
an RGB attribute normalized to [0, 1].  Positions are kept unique and sorted in
Morton order, which is the canonical point order for everything downstream
(tree construction, coefficient ordering, bitstream layout).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "VoxelizedPointCloud",
    "PlyError",
    "morton_keys",
    "make_cloud",
    "load_ply",
    "save_ply",
    "synthesize_cloud",
    "rgb_to_yuv_bt709",
    "yuv_to_rgb_bt709",
]


class PlyError(ValueError):
    """Raised for malformed PLY files or out-of-range vertex data."""


@dataclass(frozen=True)
class VoxelizedPointCloud:
    """Integer voxel positions plus per-point attributes in [0, 1].

    Invariants (established by :func:`make_cloud`): positions are unique,
    Morton-sorted int64 triples in ``[0, 2**depth)``; attributes align with
    positions row by row.
    """

    depth: int
    positions: np.ndarray  # (N, 3) int64
    attributes: np.ndarray  # (N, 3) float64 in [0, 1]

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        if self.positions.shape != (len(self), 3) or self.attributes.shape != (len(self), 3):
            raise ValueError("positions and attributes must be (N, 3) and aligned")
        if len(self) == 0:
            return
        if self.positions.min() < 0 or self.positions.max() >= (1 << self.depth):
            raise ValueError(f"coordinates outside [0, 2^{self.depth})")
        if self.attributes.min() < 0.0 or self.attributes.max() > 1.0:
            raise ValueError("attributes outside [0, 1]")
        keys = morton_keys(self.positions, self.depth)
        if np.any(np.diff(keys) <= 0):
            raise ValueError("positions not strictly increasing in Morton order")


def morton_keys(positions: np.ndarray, depth: int) -> np.ndarray:
    """Interleave coordinate bits into the canonical sort key.

    Bit ``k`` of x lands at key bit ``3k + 2``, y at ``3k + 1``, z at ``3k``,
    so the most significant key bit is x's top bit.  Reading the key MSB-first
    therefore yields the binary-tree path whose split axis cycles x, y, z from
    the root down.
    """
    pos = np.asarray(positions, dtype=np.int64)
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    key = np.zeros(pos.shape[0], dtype=np.int64)
    for k in range(depth):
        key |= ((x >> k) & 1) << (3 * k + 2)
        key |= ((y >> k) & 1) << (3 * k + 1)
        key |= ((z >> k) & 1) << (3 * k)
    return key


def make_cloud(depth: int, positions: np.ndarray, attributes: np.ndarray) -> VoxelizedPointCloud:
    """Canonicalize raw points: validate range, merge duplicates, Morton-sort.

    Duplicate voxels are merged by averaging their attributes.
    """
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    att = np.asarray(attributes, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] != att.shape[0]:
        raise ValueError("positions and attributes must have equal length")
    if pos.shape[0] == 0:
        return VoxelizedPointCloud(depth, pos, att)
    if pos.min() < 0 or pos.max() >= (1 << depth):
        raise PlyError(f"coordinates outside [0, 2^{depth}) after integer cast")

    keys = morton_keys(pos, depth)
    order = np.argsort(keys, kind="stable")
    keys, pos, att = keys[order], pos[order], att[order]

    uniq, first, counts = np.unique(keys, return_index=True, return_counts=True)
    if uniq.shape[0] != keys.shape[0]:
        # average attributes of co-located records
        group = np.repeat(np.arange(uniq.shape[0]), counts)
        summed = np.zeros((uniq.shape[0], 3))
        np.add.at(summed, group, att)
        att = summed / counts[:, None]
        pos = pos[first]
    att = np.clip(att, 0.0, 1.0)
    return VoxelizedPointCloud(depth, pos, att)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh) -> tuple[str, int, list[tuple[str, str]]]:
    def line() -> str:
        raw = fh.readline()
        if not raw:
            raise PlyError("unexpected end of header")
        return raw.decode("ascii", errors="replace").strip()

    if line() != "ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        ln = line()
        if ln == "end_header":
            break
        tok = ln.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported PLY format: {ln}")
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PlyError("list properties on vertex element are unsupported")
            if tok[1] not in _PLY_TYPES:
                raise PlyError(f"unsupported property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None or count is None:
        raise PlyError("malformed header: missing format or vertex element")
    names = [n for n, _ in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise PlyError(f"missing coordinate property {need!r}")
    for need in ("red", "green", "blue"):
        if need not in names:
            raise PlyError(f"missing color property {need!r}")
    return fmt, count, props


def load_ply(path, depth: int = 10) -> VoxelizedPointCloud:
    """Read a PLY file (ascii or binary_little_endian) into a cloud.

    Vertex records need x, y, z (any numeric type) and red, green, blue
    (uint8).  Coordinates are rounded to the nearest integer voxel; duplicate
    voxels are merged by averaging; colors are divided by 255.
    """
    with open(path, "rb") as fh:
        fmt, count, props = _parse_header(fh)
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if fmt == "binary_little_endian":
            blob = fh.read(dtype.itemsize * count)
            if len(blob) < dtype.itemsize * count:
                raise PlyError("truncated binary vertex data")
            data = np.frombuffer(blob, dtype=dtype, count=count)
        else:
            raw = fh.read().decode("ascii")
            rows = raw.split()
            ncol = len(props)
            if len(rows) < count * ncol:
                raise PlyError("truncated ascii vertex data")
            arr = np.array(rows[: count * ncol], dtype=np.float64).reshape(count, ncol)
            data = np.empty(count, dtype=dtype)
            for i, (name, _) in enumerate(props):
                data[name] = arr[:, i].astype(dtype[name])
    pos = np.stack(
        [np.rint(np.asarray(data[n], dtype=np.float64)).astype(np.int64) for n in ("x", "y", "z")],
        axis=1,
    )
    att = np.stack(
        [np.asarray(data[n], dtype=np.float64) / 255.0 for n in ("red", "green", "blue")], axis=1
    )
    return make_cloud(depth, pos, att)


def _color_u8(attributes: np.ndarray) -> np.ndarray:
    # round half away from zero, matching the quantizer convention
    return np.floor(attributes * 255.0 + 0.5).astype(np.uint8)


def save_ply(cloud: VoxelizedPointCloud, path, binary: bool = True) -> None:
    """Write a cloud as PLY with int32 coordinates and uint8 colors.

    ``load_ply(save_ply(c))`` reproduces ``c`` bit-exactly once attributes have
    passed through the 8-bit color quantization.
    """
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property int32 x\nproperty int32 y\nproperty int32 z\n"
        "property uint8 red\nproperty uint8 green\nproperty uint8 blue\n"
        "end_header\n"
    )
    colors = _color_u8(cloud.attributes) if n else np.zeros((0, 3), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            rec = np.empty(
                n, dtype=[("x", "<i4"), ("y", "<i4"), ("z", "<i4"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")]
            )
            for i, name in enumerate(("x", "y", "z")):
                rec[name] = cloud.positions[:, i].astype(np.int32)
            for i, name in enumerate(("red", "green", "blue")):
                rec[name] = colors[:, i]
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                p = cloud.positions[i]
                c = colors[i]
                fh.write(f"{p[0]} {p[1]} {p[2]} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# Synthetic clouds
# ---------------------------------------------------------------------------

GENERATOR_KINDS = ("sphere-shell", "cube-faces", "noise-surface")


def _smooth_colors(pos: np.ndarray, depth: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothly varying base colors plus additive noise.

    The base field is a low-frequency mix of sinusoids over normalized
    coordinates.  Noise is mostly common-mode across channels (surface texture
    is luminance-dominated) with a small independent per-channel component so
    rate-distortion curves stay nondegenerate.
    """
    u = pos.astype(np.float64) / float(1 << depth)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    freq = rng.uniform(1.5, 3.5, size=(3, 3))
    base = np.empty((pos.shape[0], 3))
    for c in range(3):
        base[:, c] = 0.5 + 0.25 * np.sin(2 * np.pi * (u @ freq[c]) + phase[c])
    base[:, 1] = 0.7 * base[:, 0] + 0.3 * base[:, 1]
    base[:, 2] = 0.7 * base[:, 0] + 0.3 * base[:, 2]
    luma_noise = rng.normal(0.0, 0.08, size=(pos.shape[0], 1))
    chroma_noise = rng.normal(0.0, 0.008, size=(pos.shape[0], 3))
    return np.clip(base + luma_noise + chroma_noise, 0.0, 1.0)


def synthesize_cloud(kind: str, depth: int, seed: int) -> VoxelizedPointCloud:
    """Deterministic surface-like test cloud.

    ``sphere-shell``: one-voxel-thick sphere with seed-jittered center/radius.
    ``cube-faces``: all voxels on the grid cube's six faces.
    ``noise-surface``: a two-voxel-thick bumpy heightfield z = f(x, y).
    """
    if not 4 <= depth <= 10:
        raise ValueError(f"depth must be in [4, 10], got {depth}")
    if kind not in GENERATOR_KINDS:
        raise ValueError(f"unknown generator kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([hash_kind(kind), depth, seed]))
    side = 1 << depth

    if kind == "cube-faces":
        idx = np.arange(side)
        gx, gy = np.meshgrid(idx, idx, indexing="ij")
        faces = []
        for axis in range(3):
            for value in (0, side - 1):
                face = np.empty((side * side, 3), dtype=np.int64)
                face[:, axis] = value
                face[:, (axis + 1) % 3] = gx.ravel()
                face[:, (axis + 2) % 3] = gy.ravel()
                faces.append(face)
        pos = np.concatenate(faces, axis=0)
    elif kind == "sphere-shell":
        radius = (0.125 + 0.004 * rng.uniform(-1.0, 1.0)) * side
        center = side / 2.0 + rng.uniform(-2.0, 2.0, size=3)
        lo = np.maximum(np.floor(center - radius - 1).astype(np.int64), 0)
        hi = np.minimum(np.ceil(center + radius + 1).astype(np.int64) + 1, side)
        ax = [np.arange(lo[i], hi[i]) for i in range(3)]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        dist = np.linalg.norm(pos + 0.5 - center, axis=1)
        pos = pos[np.abs(dist - radius) <= 0.5]
    else:  # noise-surface
        idx = np.arange(side)
        gx, gy = np.meshgrid(idx, idx, indexing="ij")
        u = gx / side
        v = gy / side
        amps = rng.uniform(0.03, 0.08, size=4)
        phases = rng.uniform(0.0, 2 * np.pi, size=4)
        h = 0.5 + (
            amps[0] * np.sin(2 * np.pi * 1.7 * u + phases[0])
            + amps[1] * np.sin(2 * np.pi * 2.3 * v + phases[1])
            + amps[2] * np.sin(2 * np.pi * (1.1 * u + 1.9 * v) + phases[2])
            + amps[3] * np.sin(2 * np.pi * (2.9 * u - 1.3 * v) + phases[3])
        )
        h = h + rng.normal(0.0, 0.004, size=h.shape)
        z0 = np.clip((h * side).astype(np.int64), 0, side - 2)
        base = np.stack([gx.ravel(), gy.ravel(), z0.ravel()], axis=1)
        crust = base.copy()
        crust[:, 2] += 1
        pos = np.concatenate([base, crust], axis=0)

    att = _smooth_colors(pos, depth, rng)
    return make_cloud(depth, pos, att)


def hash_kind(kind: str) -> int:
    # stable across processes (builtin hash is salted)
    return sum((i + 1) * b for i, b in enumerate(kind.encode("ascii"))) & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# BT.709 colorspace (full range) for the transform-coding baseline
# ---------------------------------------------------------------------------

_RGB_TO_YUV = np.array(
    [
        [0.2126, 0.7152, 0.0722],
        [-0.2126 / 1.8556, -0.7152 / 1.8556, 0.9278 / 1.8556],
        [0.7874 / 1.5748, -0.7152 / 1.5748, -0.0722 / 1.5748],
    ]
)
_YUV_TO_RGB = np.linalg.inv(_RGB_TO_YUV)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_yuv_bt709(cloud: VoxelizedPointCloud) -> VoxelizedPointCloud:
    """Full-range BT.709 with offset-binary chroma (neutral maps to 0.5)."""
    yuv = cloud.attributes @ _RGB_TO_YUV.T + _CHROMA_OFFSET
    return VoxelizedPointCloud(cloud.depth, cloud.positions, yuv)


def yuv_to_rgb_bt709(cloud: VoxelizedPointCloud) -> VoxelizedPointCloud:
    rgb = (cloud.attributes - _CHROMA_OFFSET) @ _YUV_TO_RGB.T
    return VoxelizedPointCloud(cloud.depth, cloud.positions, rgb)
